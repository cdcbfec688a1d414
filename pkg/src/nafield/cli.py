"""nafield command line: pretrain, transfer, energy-slice, eval and synth gen|bench.

Exit codes: 0 ok, 2 bad input or format, 3 degenerate training, 4 optimisation failure.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import synth
from .attention import DecoderParams
from .effector import default_hand
from .energy import (Demonstration, OptimizationError, energy_slice, optimize_pose, total_energy,
                     write_trajectory_csv)
from .formats import (DemoFile, FormatError, atomic_write, build_config, group_config, load_config,
                      load_demo, load_effector, load_pose, load_scene, save_pose, save_scene)
from .keypoints import EmptyKeypointsError
from .training import train, write_loss_csv

EXIT_OK, EXIT_INPUT, EXIT_TRAINING, EXIT_OPTIMIZATION = 0, 2, 3, 4

log = logging.getLogger("nafield")


@contextlib.contextmanager
def atomic_output(path):
    """Yield a temporary sibling path; rename it onto ``path`` only if the block succeeds."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_params(path) -> DecoderParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return DecoderParams.from_bytes(blob)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _field_params(args) -> DecoderParams | None:
    if args.method == "idw":
        if args.params:
            raise FormatError("--params makes no sense with --method idw")
        return None
    if not args.params:
        raise FormatError("--method attention needs --params")
    return load_params(args.params)


def _check_dims(params, *clouds) -> None:
    for c in clouds:
        if params is not None and c.dim != params.feature_dim:
            raise FormatError(f"scene has C={c.dim}, decoder expects C={params.feature_dim}")
    if len({c.dim for c in clouds}) > 1:
        raise FormatError("scenes disagree on feature dimension")


def _report_dict(rep) -> dict:
    return {k: float(v) for k, v in rep.as_dict().items()}


# -- commands ---------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    tcfg = build_config("training", cfg["training"],
                        {"seed": args.seed, "iterations": args.iterations, "tau": args.tau})
    if len(args.scenes) < 2:
        raise FormatError("pretrain needs at least two scene files")
    clouds = [load_scene(p) for p in args.scenes]
    _check_dims(None, *clouds)
    result = train(clouds, tcfg)
    out = Path(args.out)
    atomic_write(out, result.params.to_bytes())
    loss_path = out.with_name(out.stem + ".loss.csv")
    with atomic_output(loss_path) as tmp:
        write_loss_csv(tmp, result.losses)
    print(f"keypoints={result.keypoints.count} loss[0]={result.losses[0]:.6g} "
          f"loss[-1]={result.losses[-1]:.6g} -> {out}, {loss_path}")
    return EXIT_OK


def _energy_config(args):
    cfg = load_config(args.config)
    return build_config("energy", cfg["energy"], {
        "seed": getattr(args, "seed", None), "restarts": getattr(args, "restarts", None),
        "steps": getattr(args, "steps", None)})


def cmd_transfer(args) -> int:
    ecfg = _energy_config(args)
    params = _field_params(args)
    model, source, beta_hat = load_demo(args.demo)
    target = load_scene(args.target)
    _check_dims(params, source, target)
    if args.region is not None and (target.labels is None or not np.any(target.labels == args.region)):
        raise FormatError(f"target scene has no points labelled {args.region}")
    demo = Demonstration.create(params, model, source, beta_hat)
    result = optimize_pose(params, demo, target, ecfg)
    extra = {
        "method": args.method,
        "energy": _report_dict(result.report),
        "best_restart": result.best_restart,
        "restarts": [{"index": o.index, "total": None if o.failed else float(o.total),
                      "failed": o.failed, "message": o.message} for o in result.restarts],
    }
    if args.region is not None:
        metric = synth.success_metric(result.beta, model, args.region, target)
        extra["region"] = args.region
        extra["success_metric"] = metric
    out = Path(args.out)
    traj = Path(args.trajectory) if args.trajectory else out.with_name(out.stem + ".trajectory.csv")
    with atomic_output(traj) as tmp:
        write_trajectory_csv(tmp, result.trajectory, model.n_joints)
    save_pose(out, result.beta, extra)
    print(_dump({k: extra[k] for k in extra if k != "restarts"}), end="")
    return EXIT_OK


def parse_plane(text: str) -> tuple[str, float]:
    axis, sep, value = text.partition("=")
    axis = axis.strip().lower()
    if not sep or axis not in ("x", "y", "z"):
        raise FormatError(f"bad plane {text!r}; expected e.g. z=0.05")
    try:
        h = float(value)
    except ValueError:
        raise FormatError(f"bad plane height in {text!r}") from None
    if not np.isfinite(h):
        raise FormatError(f"bad plane height in {text!r}")
    return axis, h


def cmd_energy_slice(args) -> int:
    axis, height = parse_plane(args.plane)
    if args.grid < 2:
        raise FormatError("--grid needs at least 2")
    params = _field_params(args)
    model, source, beta_hat = load_demo(args.demo)
    target = load_scene(args.target)
    _check_dims(params, source, target)
    demo = Demonstration.create(params, model, source, beta_hat)
    u, v, e = energy_slice(params, demo, target, height, args.grid, axis)
    names = [a for a in "xyz" if a != axis]
    lines = [f"# plane {axis}={height!r} grid {args.grid} method {args.method}",
             f"i,j,{names[0]},{names[1]},E_feat"]
    for i in range(args.grid):
        for j in range(args.grid):
            lines.append(f"{i},{j},{float(u[i])!r},{float(v[j])!r},{float(e[i, j])!r}")
    atomic_write(args.out, "\n".join(lines) + "\n")
    i, j = np.unravel_index(np.argmin(e), e.shape)
    print(f"min E_feat={e[i, j]:.6g} at {names[0]}={u[i]:.4f} {names[1]}={v[j]:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.effector:
        model = load_effector(args.effector)
    elif args.demo:
        model, _, _ = load_demo(args.demo)
    else:
        raise FormatError("eval needs --effector or --demo")
    beta = load_pose(args.pose, model)
    target = load_scene(args.target)
    try:
        metric = synth.success_metric(beta, model, args.region, target)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    report = {"region": args.region, "success_metric": metric, "threshold": args.threshold,
              "success": bool(metric <= args.threshold)}
    if args.demo and args.method:
        params = _field_params(args)
        _, source, beta_hat = load_demo(args.demo)
        demo = Demonstration.create(params, model, source, beta_hat)
        report["energy"] = _report_dict(total_energy(params, demo, target, beta, _energy_config(args)))
    text = _dump(report)
    if args.out:
        atomic_write(args.out, text)
    print(text, end="")
    return EXIT_OK


# -- synth ------------------------------------------------------------------------

def _placement(d) -> synth.Placement:
    if not isinstance(d, dict) or "object" not in d:
        raise FormatError("placement needs an 'object'")
    rot = d.get("rotation")
    if rot is None:
        rot = synth.rotation_z(float(d.get("yaw", 0.0)))
    try:
        return synth.placement(d["object"], rot, d.get("translation", (0.0, 0.0, 0.0)))
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def scene_spec_from_dict(d: dict) -> tuple[synth.SynthSceneSpec, int, int]:
    known = {"target", "distractors", "sigma", "seed", "confusable", "feature_dim", "vocab_seed"}
    unknown = set(d) - known
    if unknown:
        raise FormatError(f"unknown scene spec keys {sorted(unknown)}")
    if "target" not in d:
        raise FormatError("scene spec needs a 'target'")
    spec = synth.SynthSceneSpec(_placement(d["target"]),
                                tuple(_placement(x) for x in d.get("distractors", ())),
                                float(d.get("sigma", 0.05)), int(d.get("seed", 0)),
                                float(d.get("confusable", 0.0)))
    return spec, int(d.get("feature_dim", 8)), int(d.get("vocab_seed", 0))


def suite_from_dict(d: dict, config: dict | None = None) -> synth.SuiteSpec:
    """Suite fields at top level; ``training.*`` / ``energy.*`` dotted keys allowed alongside."""
    plain = {k: v for k, v in d.items() if "." not in k}
    dotted = {k: v for k, v in d.items() if "." in k}
    grouped = group_config(dotted)
    for section, values in (config or {}).items():
        grouped[section].update(values)
    fields = {f.name for f in dataclasses.fields(synth.SuiteSpec)} - {"training", "energy"}
    unknown = set(plain) - fields
    if unknown:
        raise FormatError(f"unknown suite keys {sorted(unknown)}")
    if isinstance(plain.get("seeds"), int):
        plain["seeds"] = tuple(range(plain["seeds"]))
    for key in ("seeds", "methods"):
        if key in plain:
            plain[key] = tuple(plain[key])
    base = synth.SuiteSpec()
    training = build_config("training", {**dataclasses.asdict(base.training), **grouped["training"]})
    energy = build_config("energy", {**dataclasses.asdict(base.energy), **grouped["energy"]})
    suite = synth.SuiteSpec(**plain, training=training, energy=energy)
    if suite.kind not in ("self", "distractor", "cross-object"):
        raise FormatError(f"unknown suite kind {suite.kind!r}")
    for m in suite.methods:
        if m not in ("attention", "idw"):
            raise FormatError(f"unknown method {m!r}")
    for obj in (suite.demo_object, suite.test_object):
        if obj not in synth.CATALOG:
            raise FormatError(f"unknown object {obj!r}")
    return suite


def _read_spec(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def cmd_synth_gen(args) -> int:
    if args.spec:
        if not args.out:
            raise FormatError("synth gen --spec needs --out")
        spec, dim, vocab_seed = scene_spec_from_dict(_read_spec(args.spec))
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
        try:
            cloud = synth.generate_scene(spec, synth.Vocabulary.build(dim, vocab_seed))
        except ValueError as exc:
            raise FormatError(str(exc)) from None
        save_scene(args.out, cloud)
        print(f"{cloud.n} points, C={cloud.dim} -> {args.out}")
        return EXIT_OK
    if not args.suite or not args.out_dir:
        raise FormatError("synth gen needs --spec/--out or --suite/--out-dir")
    suite = suite_from_dict(_read_spec(args.suite))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = synth.Vocabulary.build(suite.feature_dim, suite.vocab_seed)
    model = default_hand()
    atomic_write(out / "hand.json", _dump(model.to_dict()))
    save_scene(out / "demo_scene.nafc", synth.generate_scene(synth.demo_spec(suite), vocab))
    beta = synth.demo_grasp(synth.CATALOG[suite.demo_object], suite.demo_part, model=model)
    DemoFile("hand.json", "demo_scene.nafc", beta).save(out / "demo.json")
    for i, spec in enumerate(synth.pretrain_specs(suite)):
        save_scene(out / f"pretrain_{i:02d}.nafc", synth.generate_scene(spec, vocab))
    for seed in suite.seeds:
        save_scene(out / f"test_{seed:02d}.nafc", synth.generate_scene(synth.test_spec(suite, seed), vocab))
    atomic_write(out / "region.txt", f"{synth.target_region(suite)}\n")
    print(f"suite {suite.name!r}: demo, {suite.pretrain_scenes} pretraining and "
          f"{len(suite.seeds)} test scenes -> {out}")
    return EXIT_OK


def cmd_synth_bench(args) -> int:
    config = load_config(args.config) if args.config else None
    suite = suite_from_dict(_read_spec(args.suite), config)
    fitted = {"attention": load_params(args.params)} if args.params else None
    rows = synth.benchmark(suite, fitted=fitted)
    with atomic_output(args.out) as tmp:
        synth.write_benchmark_csv(tmp, rows)
    counts = synth.success_counts(rows)
    for method in suite.methods:
        print(f"{suite.name} {method}: {counts.get(method, 0)}/{len(suite.seeds)} successes")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _add_field_args(p) -> None:
    p.add_argument("--params", help="decoder parameters from `pretrain` (attention field)")
    p.add_argument("--method", choices=("attention", "idw"), default="attention",
                   help="field used for the feature energy (default: attention)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nafield", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="fit decoder parameters on a set of scenes")
    p.add_argument("--scenes", nargs="+", required=True, help="two or more scene files")
    p.add_argument("--config", help="JSON file of dotted keys, e.g. {\"training.tau\": 0.1}")
    p.add_argument("--out", required=True, help="parameter file to write; losses go to <stem>.loss.csv")
    p.add_argument("--seed", type=int, help="overrides training.seed")
    p.add_argument("--iterations", type=int, help="overrides training.iterations")
    p.add_argument("--tau", type=float, help="overrides training.tau")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="optimise the hand pose in a target scene")
    _add_field_args(p)
    p.add_argument("--demo", required=True, help="demonstration file")
    p.add_argument("--target", required=True, help="target scene file")
    p.add_argument("--config", help="JSON file of dotted keys, e.g. {\"energy.restarts\": 8}")
    p.add_argument("--out", required=True, help="pose file to write")
    p.add_argument("--trajectory", help="trajectory CSV (default: <stem>.trajectory.csv)")
    p.add_argument("--region", type=int, help="region label; adds the success metric to the report")
    p.add_argument("--seed", type=int, help="overrides energy.seed")
    p.add_argument("--restarts", type=int, help="overrides energy.restarts")
    p.add_argument("--steps", type=int, help="overrides energy.steps")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("energy-slice", help="feature energy over a planar grid of hand positions")
    _add_field_args(p)
    p.add_argument("--demo", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--plane", required=True, help="axis=height, e.g. z=0.015")
    p.add_argument("--grid", type=int, default=32, help="cells per side (default 32)")
    p.add_argument("--out", required=True, help="CSV to write")
    p.set_defaults(func=cmd_energy_slice)

    p = sub.add_parser("eval", help="success metric of a pose against a labelled region")
    p.add_argument("--pose", required=True, help="pose or demonstration file")
    p.add_argument("--target", required=True, help="labelled scene file")
    p.add_argument("--region", type=int, required=True, help="region label in the target scene")
    p.add_argument("--effector", help="effector model (JSON)")
    p.add_argument("--demo", help="demonstration; supplies the effector and enables energy terms")
    p.add_argument("--params", help="decoder parameters, for the energy terms")
    p.add_argument("--method", choices=("attention", "idw"), help="also report energy terms with this field")
    p.add_argument("--config", help="JSON file of dotted keys for the energy weights")
    p.add_argument("--threshold", type=float, default=synth.SUCCESS_THRESHOLD,
                   help=f"success distance in metres (default {synth.SUCCESS_THRESHOLD})")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="synthetic scenes and the transfer benchmark")
    ssub = p.add_subparsers(dest="synth_command", required=True)
    g = ssub.add_parser("gen", help="generate one scene (--spec) or a whole suite (--suite)")
    g.add_argument("--spec", help="scene spec JSON")
    g.add_argument("--out", help="scene file to write (with --spec)")
    g.add_argument("--suite", help="suite spec JSON")
    g.add_argument("--out-dir", help="directory for the suite's files (with --suite)")
    g.add_argument("--seed", type=int, help="overrides the scene spec's seed")
    g.set_defaults(func=cmd_synth_gen)
    b = ssub.add_parser("bench", help="run a benchmark suite, write per-scene CSV")
    b.add_argument("--suite", required=True, help="suite spec JSON")
    b.add_argument("--config", help="JSON file of dotted keys applied on top of the suite")
    b.add_argument("--params", help="pretrained attention parameters (skips training)")
    b.add_argument("--out", required=True, help="CSV to write")
    b.set_defaults(func=cmd_synth_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"nafield: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EmptyKeypointsError as exc:
        print(f"nafield: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except FloatingPointError as exc:
        print(f"nafield: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except OptimizationError as exc:
        print(f"nafield: optimisation failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION


if __name__ == "__main__":
    sys.exit(main())
