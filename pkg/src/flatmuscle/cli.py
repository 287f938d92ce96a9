"""Command-line entry point.

::

    flatmuscle flatness MODEL TRAJECTORY --out DIR
    flatmuscle episode SCENARIO --episodes N --seed S --out DIR
    flatmuscle rally SCENARIO --episodes N --seed S --out DIR
    flatmuscle metrics SCENARIO --episodes N --seed S --out DIR
    flatmuscle replay DIR/manifest.json --out DIR2

Every run first writes ``manifest.json`` into its output directory with the
resolved configuration; when the run finishes the manifest gains the SHA-256
of every artifact.  ``replay`` re-executes a manifest and compares.

Exit codes: 0 success, 1 criteria failure, 2 usage or configuration error.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import flatness, harness, plants, skeleton

MANIFEST = "manifest.json"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve_file(ref):
    """Absolute path of an existing file, or a bundled model name unchanged."""
    p = Path(ref)
    if p.exists():
        return str(p.resolve())
    if p.parent == Path(".") and p.name.removesuffix(".json") in plants.BUILDERS:
        return p.name.removesuffix(".json")
    raise ConfigError(f"{ref}: no such file")


# ------------------------------------------------------------------- runners


def run_flatness(config, out):
    """Flat inversion plus open-loop replay; returns ``(exit_code, summary)``."""
    model = skeleton.load_model(config["model"])
    traj = flatness.load_trajectory_csv(config["trajectory"])
    if traj(0.0)[0].shape != (model.n,):
        raise ConfigError(f"trajectory: expected {model.n} joint columns, "
                          f"got {traj(0.0)[0].shape[0]}")
    report = flatness.flat_invert(traj, model, config["dt_ctrl"],
                                  cocontraction=config["cocontraction"])
    rms = None
    if report.feasible:
        try:
            rms = flatness.round_trip_rms(report, model, dt=config["dt"])
        except skeleton.PlantFault as exc:
            report.notes["replay_fault"] = str(exc)
    failures = [c for c, ok in (("C1", report.c1_ok), ("C2", report.c2_ok), ("C3", report.c3_ok))
                if not ok.all()]
    if rms is None or not rms < config["threshold"]:
        failures.append("round_trip")
    report.notes.update({"round_trip_rms": rms, "threshold": config["threshold"],
                         "failures": failures, "passed": not failures})
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    rms_txt = "n/a" if rms is None else f"{rms:.3e} rad"
    line = (f"flatness {model.name or 'model'}: feasible={report.feasible} rms={rms_txt} "
            f"{'PASS' if not failures else 'FAIL ' + ','.join(failures)}")
    return (EXIT_OK if not failures else EXIT_FAIL), line


def run_scenario(command, config, out, workers=None):
    """Episodes, rallies or metrics only; returns ``(exit_code, summary)``."""
    sc = harness.scenario_from_dict(config["scenario"])
    want = "dual" if command == "rally" else "single" if command == "episode" else sc.mode
    if sc.mode != want:
        raise ConfigError(f"mode: '{command}' needs a {want} scenario, got '{sc.mode}'")
    logs = harness.run_many(sc, config["episodes"], config["seed"], workers)
    if command != "metrics":
        (out / "logs").mkdir(exist_ok=True)
        for i, lg in enumerate(logs):
            lg.to_csv(out / "logs" / f"{command}_{i:04d}.csv")
            lg.to_json(out / "logs" / f"{command}_{i:04d}.json")
    met = harness.compute_metrics(logs)
    _write_json(out / "metrics.json", harness._plain(met.to_dict()))
    _write_json(out / "outcomes.json", [harness._plain(lg.outcome) for lg in logs])
    return EXIT_OK, met.summary()


# ------------------------------------------------------------------ manifest


def _execute(manifest, out, workers=None):
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, out=str(out), artifacts={})
    _write_json(out / MANIFEST, manifest)
    if manifest["command"] == "flatness":
        code, line = run_flatness(manifest["config"], out)
    else:
        code, line = run_scenario(manifest["command"], manifest["config"], out, workers)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest["artifacts"] = {str(p.relative_to(out)): _sha256(p) for p in files}
    manifest["exit_code"] = code
    _write_json(out / MANIFEST, manifest)
    return code, line


def _flatness_manifest(args):
    model = _resolve_file(args.model)
    traj = _resolve_file(args.trajectory)
    config = {"model": model, "trajectory": traj, "dt": args.dt or 1e-4,
              "dt_ctrl": args.dt_ctrl or 1e-3, "threshold": args.threshold,
              "cocontraction": args.cocontraction,
              "inputs_sha256": {"trajectory": _sha256(traj)}}
    if Path(model).exists():
        config["inputs_sha256"]["model"] = _sha256(model)
    return {"command": "flatness", "config": config, "seed": None}


def _scenario_manifest(args):
    path = Path(args.scenario)
    if not path.exists():
        raise ConfigError(f"{args.scenario}: no such file")
    sc = harness.load_scenario(path)
    changes = {}
    if args.dt is not None:
        changes["dt"] = args.dt
    if args.dt_ctrl is not None:
        changes["dt_ctrl"] = args.dt_ctrl
    if sc.plant not in plants.BUILDERS:
        changes["plant"] = str((Path(sc.base_dir) / sc.plant).resolve())
    try:
        sc = replace(sc, **changes)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    if args.episodes < 1:
        raise ConfigError("--episodes must be at least 1")
    seed = sc.seed if args.seed is None else args.seed
    config = {"scenario": sc.to_dict(), "episodes": args.episodes, "seed": seed}
    return {"command": args.command, "config": config, "seed": seed}


def _replay(args):
    src = Path(args.manifest)
    if src.is_dir():
        src = src / MANIFEST
    try:
        old = json.loads(src.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{src}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{src}: line {exc.lineno}: {exc.msg}") from exc
    for key in ("command", "config", "artifacts"):
        if key not in old:
            raise ConfigError(f"{src}: manifest field '{key}' missing")
    stale = [k for k, h in old["config"].get("inputs_sha256", {}).items()
             if _sha256(old["config"][k]) != h]
    if stale:
        print(f"replay: input file(s) changed since the run: {', '.join(stale)}")
        return EXIT_FAIL, "replay not attempted"
    out = Path(args.out) if args.out else src.parent / "replay"
    base = {k: old[k] for k in ("command", "config", "seed")}
    code, line = _execute(base, out)
    new = json.loads((out / MANIFEST).read_text())
    diff = sorted(k for k in set(old["artifacts"]) | set(new["artifacts"])
                  if old["artifacts"].get(k) != new["artifacts"].get(k))
    if diff:
        print(f"replay: {len(diff)} artifact(s) differ: {', '.join(diff)}")
        return EXIT_FAIL, line
    print(f"replay: {len(new['artifacts'])} artifacts byte-identical")
    return EXIT_OK, line


# ----------------------------------------------------------------------- cli


def build_parser():
    ap = argparse.ArgumentParser(prog="flatmuscle", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("flatness", help="flat inversion and open-loop round trip")
    f.add_argument("model", help="plant model JSON (or a bundled name: pend1, arm3d, rankdef)")
    f.add_argument("trajectory", help="trajectory CSV with columns t, y1..yn")
    f.add_argument("--out", required=True)
    f.add_argument("--dt", type=float, default=None, help="plant step (default 1e-4 s)")
    f.add_argument("--dt-ctrl", type=float, default=None, help="control period (default 1e-3 s)")
    f.add_argument("--threshold", type=float, default=5e-3, help="joint RMS limit (rad)")
    f.add_argument("--cocontraction", type=float, default=0.15)

    for name, text in (("episode", "single-strike episodes"), ("rally", "dual-robot rallies"),
                       ("metrics", "metrics only, no per-step logs")):
        s = sub.add_parser(name, help=text)
        s.add_argument("scenario", help="scenario JSON")
        s.add_argument("--seed", type=int, default=None, help="base seed (default: scenario)")
        s.add_argument("--episodes", type=int, default=1)
        s.add_argument("--dt", type=float, default=None)
        s.add_argument("--dt-ctrl", type=float, default=None)
        s.add_argument("--out", required=True)

    r = sub.add_parser("replay", help="re-run a manifest and compare artifacts")
    r.add_argument("manifest", help="manifest.json or the directory holding it")
    r.add_argument("--out", default=None, help="output directory (default: <run>/replay)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            code, line = _replay(args)
        else:
            if args.command == "flatness":
                manifest = _flatness_manifest(args)
            else:
                manifest = _scenario_manifest(args)
            code, line = _execute(manifest, Path(args.out))
    except (ConfigError, harness.ScenarioError, skeleton.ModelFormatError,
            flatness.TrajectoryError, FileNotFoundError, KeyError, TypeError, ValueError) as exc:
        print(f"flatmuscle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
