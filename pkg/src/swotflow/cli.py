"""Command-line experiment runner.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric
failure (non-finite training, failed gradient check), 3 file I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datasets as ds
from .checkpoint import load_checkpoint, save_checkpoint, write_history, write_timing
from .diffcore import NonFiniteError
from .flows import FlowModel, FlowSpec, MLPSpec, intermediate_outputs, model_forward, model_inverse
from .losstrain import (
    LossConfig,
    Schedule,
    TrainingAborted,
    gradcheck_instance,
    loss_gradient_check,
    train,
)
from .metrics import barycenter_mse, cycle_consistency_error, elementary_costs, knn_accuracy
from .otoracle import GaussianParams, gaussian_barycenter_fixedpoint
from .swdist import sample_projections, sliced_wasserstein_value

log = logging.getLogger("swotflow")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class ConfigError(ValueError):
    """Invalid experiment configuration; ``errors`` holds ``(field path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in self.errors))


class NumericFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------- config

MODEL_KEYS = {"n_flows", "hidden", "actnorm", "mask", "clamp"}
DATA_KEYS = {"path", "protocol", "role", "gaussian", "affine"} | {f.name for f in fields(ds.ShapeSpec)}


@dataclass
class ExperimentConfig:
    source: dict
    target: dict
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    output_dir: str = "run"
    seed: int = 0
    base_dir: str = "."

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d


def _check_keys(d, allowed, path, errors):
    for key in d:
        if key not in allowed:
            errors.append((f"{path}.{key}", "unknown field"))


def _validate_data(d, path, base, errors, allow_gaussian):
    if not isinstance(d, dict):
        errors.append((path, "must be an object"))
        return
    _check_keys(d, DATA_KEYS, path, errors)
    kinds = [k for k in ("path", "protocol", "gaussian", "family") if k in d]
    if len(kinds) != 1:
        errors.append((path, "needs exactly one of 'path', 'protocol', 'gaussian', 'family'"))
        return
    kind = kinds[0]
    if kind == "path":
        p = base / d["path"]
        if not p.is_file():
            errors.append((f"{path}.path", f"file not found: {p}"))
    elif kind == "protocol":
        if d["protocol"] not in ("P1", "P2"):
            errors.append((f"{path}.protocol", "must be 'P1' or 'P2'"))
        if d.get("role", path.split(".")[-1]) not in ("source", "target"):
            errors.append((f"{path}.role", "must be 'source' or 'target'"))
    elif kind == "gaussian":
        if not allow_gaussian:
            errors.append((f"{path}.gaussian", "a Gaussian density is only allowed as the target"))
        else:
            try:
                GaussianParams.from_dict(d["gaussian"]).check_spd()
            except (KeyError, TypeError, ValueError) as err:
                errors.append((f"{path}.gaussian", str(err)))
    else:
        shape = {k: v for k, v in d.items() if k not in ("affine",)}
        try:
            ds.ShapeSpec.from_dict(shape).validate()
        except (TypeError, ValueError) as err:
            errors.append((path, str(err)))
    if "affine" in d:
        aff = d["affine"]
        if not isinstance(aff, dict) or set(aff) - {"A", "t"}:
            errors.append((f"{path}.affine", "must be an object with 'A' and 't'"))


def validate_config(raw, base_dir=".", seed_override=None, out_override=None) -> ExperimentConfig:
    """Check ``raw`` (parsed JSON) and return an :class:`ExperimentConfig`.

    All problems are collected and raised together as one :class:`ConfigError`.
    """
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    base = Path(base_dir)
    _check_keys(raw, {f.name for f in fields(ExperimentConfig)} - {"base_dir"}, "<root>", errors)
    for key in ("source", "target"):
        if key not in raw:
            errors.append((key, "missing"))
        else:
            _validate_data(raw[key], key, base, errors, allow_gaussian=key == "target")

    model = raw.get("model", {})
    if not isinstance(model, dict):
        errors.append(("model", "must be an object"))
        model = {}
    _check_keys(model, MODEL_KEYS, "model", errors)
    if model.get("mask", "alternating") != "alternating":
        errors.append(("model.mask", "only 'alternating' is supported"))
    try:
        MLPSpec(tuple(model.get("hidden", (8, 8))))
        if int(model.get("n_flows", 4)) < 1:
            errors.append(("model.n_flows", "must be >= 1"))
    except (TypeError, ValueError) as err:
        errors.append(("model.hidden", str(err)))

    for key, cls in (("loss", LossConfig), ("schedule", Schedule)):
        section = raw.get(key, {})
        if not isinstance(section, dict):
            errors.append((key, "must be an object"))
            continue
        allowed = {f.name for f in fields(cls)} - {"seed"}
        _check_keys(section, allowed, key, errors)
        try:
            cls(**{k: v for k, v in section.items() if k in allowed})
        except (TypeError, ValueError) as err:
            errors.append((key, str(err)))

    seed = raw.get("seed", 0) if seed_override is None else seed_override
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append(("seed", "must be a non-negative integer"))
    semi = "gaussian" in raw.get("target", {}) if isinstance(raw.get("target"), dict) else False
    if semi and raw.get("loss", {}).get("semi_discrete") is False:
        errors.append(("loss.semi_discrete", "a Gaussian target requires semi-discrete training"))
    if errors:
        raise ConfigError(errors)

    loss = dict(raw.get("loss", {}))
    if semi:
        loss["semi_discrete"] = True
    return ExperimentConfig(
        source=raw["source"],
        target=raw["target"],
        model=model,
        loss=loss,
        schedule=dict(raw.get("schedule", {})),
        output_dir=str(out_override if out_override is not None else raw.get("output_dir", "run")),
        seed=seed,
        base_dir=str(base),
    )


def load_config(path, seed_override=None, out_override=None) -> ExperimentConfig:
    path = Path(path)
    raw = json.loads(path.read_text())
    return validate_config(raw, path.parent, seed_override, out_override)


def build_cloud(d, role, base_dir, seed):
    """Materialize a data section. Returns a point array or a GaussianParams."""
    if "gaussian" in d:
        return GaussianParams.from_dict(d["gaussian"])
    if "path" in d:
        pts = np.asarray(ds.load_pointcloud(Path(base_dir) / d["path"]))
    elif "protocol" in d:
        src, tgt = ds.protocol_pair(d["protocol"], n=d.get("n", 2000), seed=d.get("seed", seed))
        pts = np.asarray(src if d.get("role", role) == "source" else tgt)
    else:
        shape = {k: v for k, v in d.items() if k != "affine"}
        shape.setdefault("seed", seed if role == "source" else seed + 1)
        pts = np.asarray(ds.generate(ds.ShapeSpec.from_dict(shape)))
    if "affine" in d:
        pts = np.asarray(ds.apply_affine(pts, d["affine"]["A"], d["affine"]["t"]))
    return pts


# --------------------------------------------------------------------------- helpers


def _read_cloud(path):
    return np.asarray(ds.load_pointcloud(path))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _gaussian_arg(text):
    """A Gaussian given inline as JSON or as a path to a JSON file."""
    text = text.strip()
    raw = json.loads(text) if text.startswith("{") else json.loads(Path(text).read_text())
    return GaussianParams.from_dict(raw).check_spd()


def _out_dir(args, default):
    out = Path(args.out_dir if args.out_dir is not None else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- commands


def cmd_train(args):
    cfg = load_config(args.config, seed_override=args.seed, out_override=args.out_dir)
    out = Path(cfg.output_dir)
    if not out.is_absolute() and args.out_dir is None:
        out = Path(cfg.base_dir) / out
    out.mkdir(parents=True, exist_ok=True)

    x = build_cloud(cfg.source, "source", cfg.base_dir, cfg.seed)
    y = build_cloud(cfg.target, "target", cfg.base_dir, cfg.seed)
    dim = x.shape[1]
    if not isinstance(y, GaussianParams) and y.shape[1] != dim:
        raise ConfigError([("target", f"dimension {y.shape[1]} differs from source dimension {dim}")])
    if isinstance(y, GaussianParams) and y.dim != dim:
        raise ConfigError([("target.gaussian", f"dimension {y.dim} differs from source dimension {dim}")])

    m = cfg.model
    spec = FlowSpec(
        dim=dim, n_flows=int(m.get("n_flows", 4)), mlp=MLPSpec(tuple(m.get("hidden", (8, 8)))),
        actnorm=bool(m.get("actnorm", True)), clamp=float(m.get("clamp", 5.0)),
    )
    loss_cfg = LossConfig(**cfg.loss)
    schedule = Schedule(**cfg.schedule, seed=cfg.seed)

    resolved = cfg.to_dict()
    resolved.update(
        output_dir=str(out), model=spec.to_dict(), loss=asdict(loss_cfg), schedule=asdict(schedule)
    )
    resolved["model"]["mask"] = "alternating"
    _write_json(out / "config.resolved.json", resolved)

    model = FlowModel(spec, seed=cfg.seed)
    times = []
    start = time.perf_counter()

    def on_epoch(epoch, rep):
        times.append(time.perf_counter() - start)
        if args.verbose:
            log.info("epoch %d J=%d sw=%.6g total=%.6g", epoch, rep.n_slices, rep.sw, rep.total_value)

    try:
        model, history = train(model, x, y, schedule, loss_cfg, callback=on_epoch)
    except TrainingAborted as err:
        write_history(err.history, out / "history.csv", spec.n_flows)
        write_timing(times, out / "timing.csv")
        save_checkpoint(model, out / "checkpoint.json", {"aborted_at_epoch": err.epoch})
        raise NumericFailure(str(err)) from err

    last = history[-1]
    meta = {
        "final_J": last.n_slices,
        "final_lambda": last.lam,
        "final_gamma": last.gamma,
        "epochs": len(history),
        "seed": cfg.seed,
    }
    save_checkpoint(model, out / "checkpoint.json", meta)
    write_history(history, out / "history.csv", spec.n_flows)
    write_timing(times, out / "timing.csv")
    print(f"trained {len(history)} epochs; final SW {last.sw:.6g}; outputs in {out}")
    return EXIT_OK


def cmd_transport(args):
    model, _ = load_checkpoint(args.checkpoint)
    pts = _read_cloud(args.input)
    if pts.shape[1] != model.dim:
        raise ValueError(f"input has dimension {pts.shape[1]}, checkpoint expects {model.dim}")
    out = _out_dir(args, ".")
    stem = Path(args.input).stem
    if args.intermediates:
        if args.inverse:
            raise ValueError("--intermediates applies to the forward map only")
        outs = intermediate_outputs(model, pts)
        for m, o in enumerate(outs):
            ds.save_pointcloud(o.value, out / f"{stem}_T{m}.csv")
        print(f"wrote {len(outs)} clouds to {out}")
        return EXIT_OK
    res = model_inverse(model, pts) if args.inverse else model_forward(model, pts)
    target = out / (f"{stem}_{'inverse' if args.inverse else 'forward'}.csv")
    ds.save_pointcloud(res.value, target)
    print(f"wrote {target}")
    return EXIT_OK


def barycenter_report(model, source, target, m, n_samples=4000, seed=0):
    """Push source samples through the first ``m`` flows and compare with the
    Gaussian barycenter that puts weight ``m/M`` on the target."""
    M = model.n_flows
    if not 0 <= m <= M:
        raise ValueError(f"flow index m must be in 0..{M}, got {m}")
    samples = source.sample(n_samples, np.random.default_rng(seed))
    pushed = intermediate_outputs(model, samples)[m].value
    weight_on_target = m / M
    ref = gaussian_barycenter_fixedpoint(source, target, alpha=1.0 - weight_on_target)
    mse_mean, mse_cov = barycenter_mse(pushed, ref)
    return {
        "m": m,
        "n_flows": M,
        "weight_on_target": weight_on_target,
        "n_samples": n_samples,
        "reference": ref.to_dict(),
        "mse_mean": mse_mean,
        "mse_cov": mse_cov,
    }


def cmd_barycenter(args):
    model, _ = load_checkpoint(args.checkpoint)
    source, target = _gaussian_arg(args.source), _gaussian_arg(args.target)
    if source.dim != model.dim or target.dim != model.dim:
        raise ValueError(f"Gaussians must have dimension {model.dim}")
    seed = 0 if args.seed is None else args.seed
    report = barycenter_report(model, source, target, args.m, args.n_samples, seed)
    out = _out_dir(args, ".")
    _write_json(out / f"barycenter_m{args.m}.json", report)
    print(f"m={args.m} MSE(mean)={report['mse_mean']:.3e} MSE(cov)={report['mse_cov']:.3e}")
    return EXIT_OK


def eval_report(model, x, y, pairing=None, ks=(10,), n_slices=2000, seed=0):
    if x.shape[1] != model.dim or y.shape[1] != model.dim:
        raise ValueError(f"clouds must have dimension {model.dim}")
    tx = model_forward(model, x).value
    proj = sample_projections(n_slices, model.dim, np.random.default_rng(seed))
    report = {"n_source": len(x), "n_target": len(y)}
    if len(x) == len(y):
        report["sw_initial"] = sliced_wasserstein_value(x, y, proj)
        report["sw"] = sliced_wasserstein_value(tx, y, proj)
    costs = elementary_costs(model, x)
    report["costs"] = costs.per_flow.tolist()
    report["total_cost"] = costs.total
    report["cost_spread"] = costs.spread()
    report["cycle_error"] = cycle_consistency_error(model, x)
    if pairing is not None:
        report["knn_accuracy"] = {str(k): knn_accuracy(tx, y, pairing, k) for k in ks}
    return report


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    x, y = _read_cloud(args.x), _read_cloud(args.y)
    pairing = None
    if args.pairing is not None:
        pairing = np.loadtxt(args.pairing, dtype=np.int64, ndmin=1)
    elif args.paired:
        pairing = np.arange(len(x))
    seed = 0 if args.seed is None else args.seed
    report = eval_report(model, x, y, pairing, tuple(args.k), args.slices, seed)
    out = _out_dir(args, ".")
    _write_json(out / "eval.json", report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_gradcheck(args):
    lam, gamma = args.lam, args.gamma
    actnorm = args.actnorm
    if args.config is not None:
        cfg = load_config(args.config)
        lam = cfg.loss.get("lam", lam)
        gamma = cfg.loss.get("gamma", gamma)
        actnorm = bool(cfg.model.get("actnorm", actnorm))
    seed = 0 if args.seed is None else args.seed
    model, x, y, proj = gradcheck_instance(seed=seed, actnorm=actnorm, perturb=args.perturb)
    worst, per_param = loss_gradient_check(
        model, x, y, proj, LossConfig(lam=lam, gamma=gamma), fault=args.inject_fault
    )
    for name, err in per_param.items():
        log.debug("%s %.3e", name, err)
    status = "ok" if worst <= GRADCHECK_TOL else "FAILED"
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g}): {status}")
    if worst > GRADCHECK_TOL:
        raise NumericFailure(f"gradient check failed: {worst:.3e} > {GRADCHECK_TOL:g}")
    return EXIT_OK


def render_scatter(clouds, path, pca=False, labels=None):
    """One scatter layer per cloud, colored along a gradient; writes SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
    for i, c in enumerate(clouds):
        if c.ndim != 2 or len(c) == 0:
            raise ValueError(f"cloud {i} is empty")
    dims = {c.shape[1] for c in clouds}
    if len(dims) != 1:
        raise ValueError("all clouds must share the dimension")
    dim = dims.pop()
    if dim != 2:
        if not pca:
            raise ValueError(f"clouds have dimension {dim}; pass --pca to project on 2 components")
        from sklearn.decomposition import PCA

        proj = PCA(n_components=2, svd_solver="full").fit(np.vstack(clouds))
        clouds = [proj.transform(c) for c in clouds]

    plt.rcParams["svg.hashsalt"] = "swotflow"
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = plt.get_cmap("viridis")(np.linspace(0.0, 1.0, len(clouds)))
    for i, (c, col) in enumerate(zip(clouds, colors)):
        label = labels[i] if labels else f"cloud {i}"
        ax.scatter(c[:, 0], c[:, 1], s=2, color=col, label=label, linewidths=0)
    ax.set_aspect("equal", adjustable="datalim")
    if len(clouds) > 1:
        ax.legend(loc="best", fontsize="small", markerscale=4)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plot(args):
    clouds = [_read_cloud(p) for p in args.clouds]
    out = Path(args.output)
    if args.out_dir is not None and not out.is_absolute():
        out = _out_dir(args, ".") / out
    render_scatter(clouds, out, pca=args.pca, labels=[Path(p).stem for p in args.clouds])
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gen_data(args):
    out = _out_dir(args, ".")
    seed = 0 if args.seed is None else args.seed
    if args.protocol is not None:
        src, tgt = ds.protocol_pair(args.protocol, n=args.n, seed=seed)
        ds.save_pointcloud(src, out / f"{args.protocol.lower()}_source.csv")
        ds.save_pointcloud(tgt, out / f"{args.protocol.lower()}_target.csv")
    elif args.family == "rotated":
        noise = 0.01 if args.noise is None else args.noise
        x, y, pairing, _ = ds.gen_rotated_embedding_pair(args.n, args.dim, seed, noise=noise)
        ds.save_pointcloud(x, out / "rotated_source.csv")
        ds.save_pointcloud(y, out / "rotated_target.csv")
        np.savetxt(out / "rotated_pairing.txt", pairing, fmt="%d")
    else:
        cloud = ds.generate(ds.ShapeSpec(args.family, n=args.n, seed=seed, noise=args.noise))
        ds.save_pointcloud(cloud, out / f"{args.family}.csv")
    print(f"wrote data to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser():
    def global_flags(suppress):
        # global flags are accepted before or after the subcommand; the
        # subcommand copy must not overwrite values given before it
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, help="override the random seed", **(kw or {"default": None}))
        g.add_argument("--threads", type=int, help="limit BLAS threads", **(kw or {"default": None}))
        g.add_argument("--out-dir", help="directory for outputs", **(kw or {"default": None}))
        g.add_argument("-v", "--verbose", action="store_true", **kw)
        return g

    common = global_flags(suppress=True)
    parser = argparse.ArgumentParser(
        prog="swotflow", description="Sliced-Wasserstein transport with normalizing flows",
        parents=[global_flags(suppress=False)],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a flow from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transport", parents=[common], help="push a cloud through a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--inverse", action="store_true")
    p.add_argument("--intermediates", action="store_true", help="write every T_[m](x)")
    p.set_defaults(func=cmd_transport)

    p = sub.add_parser("barycenter", parents=[common], help="compare a flow prefix with the Gaussian barycenter")
    p.add_argument("checkpoint")
    p.add_argument("--source", required=True, help="Gaussian as inline JSON or a JSON file")
    p.add_argument("--target", required=True, help="Gaussian as inline JSON or a JSON file")
    p.add_argument("--m", type=int, required=True, help="number of flows to apply (0..M)")
    p.add_argument("--n-samples", type=int, default=4000)
    p.set_defaults(func=cmd_barycenter)

    p = sub.add_parser("eval", parents=[common], help="metrics for a checkpoint on (x, y)")
    p.add_argument("checkpoint")
    p.add_argument("x")
    p.add_argument("y")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pairing", default=None, help="file with the target index of each source point")
    g.add_argument("--paired", action="store_true", help="x[n] corresponds to y[n]")
    p.add_argument("--k", type=int, nargs="+", default=[10])
    p.add_argument("--slices", type=int, default=2000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the loss gradient")
    p.add_argument("--config", default=None)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--actnorm", action="store_true")
    p.add_argument("--perturb", type=float, default=0.3, help="parameter noise; 0 keeps the identity init")
    p.add_argument("--inject-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", parents=[common], help="SVG scatter of one or more clouds")
    p.add_argument("clouds", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--pca", action="store_true", help="project d > 2 clouds on two principal components")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic clouds as CSV")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--protocol", choices=["P1", "P2"])
    g.add_argument("--family", choices=list(ds.FAMILIES) + ["rotated"])
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dim", type=int, default=10, help="dimension of the rotated pair")
    p.add_argument("--noise", type=float, default=None, help="noise std (default: per family)")
    p.set_defaults(func=cmd_gen_data)
    return parser


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        with _threads(args.threads):
            return args.func(args)
    except ConfigError as err:
        for path, msg in err.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericFailure, NonFiniteError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"i/o error: {err.filename or err}: {err.strerror or err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
