"""Command-line entry point.

Subcommands: train, eval, gradcheck, dynamics, noise. Exit codes:
0 success, 1 configuration error, 2 runtime failure, 3 gradient check
failure. Every run writes a resolved-config snapshot sufficient to rerun
it exactly (pass the snapshot back via --config).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError, read_checkpoint, restore_into, save_checkpoint
from .data import AugmentPolicy, DataError, Dataset, load_dataset, normalize_images
from .network import SpecError, build_network
from .neuron import LifParams, NeuronParams, init_state, lif_step, pcnn_step
from .tensor import ShapeError
from .trainer import (
    ConfigError,
    TrainingDiverged,
    evaluate,
    grad_check,
    grad_check_matrix,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def _snapshot(out_dir: Path, cfg: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(cfgmod.format_flat_config(cfg))


def _norm_constants(cfg):
    mean = cfg.get("norm_mean", "")
    std = cfg.get("norm_std", "")
    if not mean or not std:
        return None, None
    return (
        tuple(float(v) for v in mean.split(",")),
        tuple(float(v) for v in std.split(",")),
    )


def _policy_from(cfg: dict[str, str]) -> AugmentPolicy | None:
    if cfg.get("augment", "0") != "1":
        return None
    mean, std = _norm_constants(cfg)
    return AugmentPolicy(mean=mean, std=std)


def _normalized_eval(ds: Dataset, cfg) -> Dataset:
    mean, std = _norm_constants(cfg)
    if mean is None:
        return ds
    return Dataset(
        images=normalize_images(ds.images, mean, std),
        labels=ds.labels,
        name=ds.name,
        split=ds.split,
    )


def _resolve(args, keys: tuple[str, ...]) -> dict[str, str]:
    file_cfg = cfgmod.read_config_file(args.config) if getattr(args, "config", None) else {}
    dataset = getattr(args, "dataset", None) or file_cfg.get("dataset")
    cli = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "augment", None):
        cli["augment"] = "1"
    return cfgmod.resolve_config(cli, file_cfg, dataset)


_TRAIN_KEYS = (
    "data_dir",
    "arch",
    "steps",
    "epochs",
    "batch_size",
    "lr",
    "lr_min",
    "seed",
    "coupling",
    "coupling_kernel",
    "arith",
    "bn",
    "neuron",
    "precision",
)


def cmd_train(args) -> int:
    cfg = _resolve(args, _TRAIN_KEYS)
    cfgmod.validate_switches(cfg)
    spec = cfgmod.network_spec_from(cfg)
    tcfg = cfgmod.train_config_from(cfg)
    data_dir = cfg.get("data_dir", "data")
    train_ds = load_dataset(cfg["dataset"], data_dir, "train")
    test_ds = _normalized_eval(load_dataset(cfg["dataset"], data_dir, "test"), cfg)
    policy = _policy_from(cfg)
    out_dir = Path(args.out)
    _snapshot(out_dir, cfg)
    log_path = out_dir / "train.log"
    metrics_path = out_dir / "metrics.csv"
    header = ["epoch", "lr", "train_loss", "train_acc", "test_acc"]

    log_fh = open(log_path, "w")
    metrics_fh = open(metrics_path, "w")
    metrics_fh.write(",".join(header) + "\n")

    def log(msg: str) -> None:
        print(msg)
        log_fh.write(msg + "\n")
        log_fh.flush()

    def on_epoch(row: dict) -> None:
        metrics_fh.write(",".join(str(row[k]) for k in header) + "\n")
        metrics_fh.flush()

    try:
        net, _ = train(spec, (train_ds, test_ds), tcfg, policy=policy, log=log, on_epoch=on_epoch)
    finally:
        metrics_fh.close()
        log_fh.close()
    save_checkpoint(out_dir / "checkpoint.ckpt", net, cfg)
    print(f"wrote {metrics_path} and {out_dir / 'checkpoint.ckpt'}")
    return EXIT_OK


def _load_checkpoint_net(path):
    ckpt_cfg, arrays = read_checkpoint(path)
    spec = cfgmod.network_spec_from(ckpt_cfg)
    dtype = np.float64 if ckpt_cfg.get("precision") == "double" else np.float32
    net = build_network(spec, seed=int(ckpt_cfg.get("seed", "0")), dtype=dtype)
    restore_into(net, arrays)
    net.frozen = True
    return net, ckpt_cfg


def _check_arch_compat(args, ckpt_cfg) -> None:
    for key in cfgmod.NETWORK_KEYS:
        requested = getattr(args, key, None)
        if requested is not None and str(requested) != ckpt_cfg.get(key):
            raise ConfigError(
                f"checkpoint was built with {key}={ckpt_cfg.get(key)!r} but "
                f"{key}={requested!r} was requested"
            )


def cmd_eval(args) -> int:
    net, ckpt_cfg = _load_checkpoint_net(args.checkpoint)
    _check_arch_compat(args, ckpt_cfg)
    dataset = args.dataset or ckpt_cfg.get("dataset")
    if dataset is None:
        raise ConfigError("no dataset named on the command line or in the checkpoint")
    data_dir = args.data_dir or ckpt_cfg.get("data_dir", "data")
    ds = _normalized_eval(load_dataset(dataset, data_dir, args.split), ckpt_cfg)
    if ds.images.shape[0] == 0:
        raise ConfigError(f"empty split: {dataset}/{args.split}")
    acc = evaluate(net, ds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "accuracy.csv", ["split", "accuracy"], [[args.split, acc]])
    print(f"top-1 accuracy on {dataset}/{args.split}: {acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    single = any(
        getattr(args, k) is not None for k in ("coupling", "arith", "bn", "neuron")
    )
    if single:
        arith = {"mult": "multiplicative", "add": "additive"}.get(
            args.arith, args.arith or "multiplicative"
        )
        reports = [
            grad_check(
                coupling=args.coupling or "inter",
                coupling_arith=arith,
                bn_mode=args.bn or "rftd",
                neuron_kind=args.neuron or "pcnn",
                tol=args.tol,
            )
        ]
    else:
        reports = grad_check_matrix(tol=args.tol)
    rows = []
    all_pass = True
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        all_pass &= rep.passed
        print(f"{status}  max_rel_err={rep.max_rel_err:.3e}  {rep.label}")
        rows.append([rep.label.replace(",", ";"), rep.max_rel_err, rep.passed])
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "gradcheck.csv", ["combo", "max_rel_err", "passed"], rows)
    print(f"gradient check: {'all passed' if all_pass else 'FAILURES'} (tol {args.tol})")
    return EXIT_OK if all_pass else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# neuron dynamics simulation

def simulate_single(
    neuron_kind: str,
    stimulus: float,
    steps: int,
    neuron: NeuronParams | None = None,
    lif: LifParams | None = None,
) -> dict[str, np.ndarray]:
    """Constant-stimulus trace of one uncoupled unit; arrays keyed f,l,e,u,y."""
    traces = {k: np.zeros(steps) for k in ("f", "l", "e", "u", "y")}
    if neuron_kind == "lif":
        lp = lif or LifParams()
        v = np.zeros(1)
        i = np.full(1, stimulus)
        for t in range(steps):
            v_pre = lp.decay * v + i
            v, y = lif_step(v, i, lp)
            traces["f"][t] = v[0]
            traces["e"][t] = lp.threshold
            traces["u"][t] = v_pre[0]
            traces["y"][t] = y[0]
        return traces
    params = neuron or NeuronParams()
    state = init_state((1,), params, dtype=np.float64)
    i_f = np.full(1, stimulus)
    i_l = np.zeros(1)
    for t in range(steps):
        state = pcnn_step(state, i_f, i_l, params)
        u = state.f * (1.0 + state.l)
        traces["f"][t] = state.f[0]
        traces["l"][t] = state.l[0]
        traces["e"][t] = state.e[0]
        traces["u"][t] = u[0]
        traces["y"][t] = state.y[0]
    return traces


def simulate_coupled_pair(
    stimulus: float,
    steps: int,
    coupling_weight: float,
    neuron: NeuronParams | None = None,
    coupling_arith: str = "multiplicative",
) -> dict[str, np.ndarray]:
    """Two mutually coupled units: each unit's linking current is the other's
    previous spike scaled by the coupling weight. Arrays have shape (steps, 2)."""
    params = neuron or NeuronParams()
    state = init_state((2,), params, dtype=np.float64)
    i_f = np.full(2, stimulus)
    traces = {k: np.zeros((steps, 2)) for k in ("f", "l", "e", "u", "y")}
    for t in range(steps):
        i_l = coupling_weight * state.y[::-1]
        state = pcnn_step(state, i_f, i_l, params, coupling_arith)
        if coupling_arith == "multiplicative":
            u = state.f * (1.0 + state.l)
        else:
            u = state.f + state.l
        traces["f"][t] = state.f
        traces["l"][t] = state.l
        traces["e"][t] = state.e
        traces["u"][t] = u
        traces["y"][t] = state.y
    return traces


def inter_spike_intervals(y: np.ndarray, discard_before: int = 0) -> list[int]:
    """Gaps between consecutive spike times at or after discard_before."""
    times = np.flatnonzero(y >= 0.5)
    times = times[times >= discard_before]
    return list(np.diff(times))


def cmd_dynamics(args) -> int:
    if args.steps < 1:
        raise ConfigError(f"steps must be >= 1, got {args.steps}")
    params = NeuronParams(
        alpha_f=args.alpha_f, alpha_l=args.alpha_l, alpha_e=args.alpha_e, v_e=args.v_e
    )
    rows = []
    if args.coupled:
        traces = simulate_coupled_pair(
            args.stimulus, args.steps, args.coupling_weight, neuron=params
        )
        for t in range(args.steps):
            for nidx in (0, 1):
                rows.append(
                    [t + 1, nidx]
                    + [traces[k][t, nidx] for k in ("f", "l", "e", "u", "y")]
                )
        spike_cols = [traces["y"][:, 0], traces["y"][:, 1]]
    else:
        traces = simulate_single(
            args.neuron, args.stimulus, args.steps,
            neuron=params, lif=LifParams(args.lif_decay, args.lif_threshold),
        )
        for t in range(args.steps):
            rows.append([t + 1, 0] + [traces[k][t] for k in ("f", "l", "e", "u", "y")])
        spike_cols = [traces["y"]]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "dynamics.csv", ["step", "neuron", "f", "l", "e", "u", "y"], rows)
    for nidx, y in enumerate(spike_cols):
        isi = inter_spike_intervals(y, discard_before=args.steps // 2)
        print(f"neuron {nidx}: {int(y.sum())} spikes, distinct post-transient ISIs: "
              f"{sorted(set(isi))}")
    print(f"wrote {out_dir / 'dynamics.csv'}")
    return EXIT_OK


def cmd_noise(args) -> int:
    levels = [float(v) for v in args.levels.split(",") if v.strip() != ""]
    if not levels:
        raise ConfigError("no noise levels given")
    if args.mode == "silencing" and any(not 0.0 <= v <= 1.0 for v in levels):
        raise ConfigError(f"silencing rates must lie in [0, 1], got {levels}")
    net, ckpt_cfg = _load_checkpoint_net(args.checkpoint)
    dataset = args.dataset or ckpt_cfg.get("dataset")
    if dataset is None:
        raise ConfigError("no dataset named on the command line or in the checkpoint")
    data_dir = args.data_dir or ckpt_cfg.get("data_dir", "data")
    ds = _normalized_eval(load_dataset(dataset, data_dir, args.split), ckpt_cfg)
    rows = []
    for idx, level in enumerate(levels):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, idx]))
        if args.mode == "gaussian":
            acc = evaluate(net, ds, noise_std=level, noise_rng=rng)
        else:
            acc = evaluate(net, ds, silencing_rate=level, silencing_rng=rng)
        rows.append([level, acc])
        print(f"{args.mode} level {level}: accuracy {acc:.4f}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "noise.csv", ["level", "accuracy"], rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpcnn",
        description="Train and probe deep pulse-coupled neural networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write metrics/checkpoint")
    p.add_argument("--dataset", choices=["mnist", "fashion", "cifar10", "synthetic"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--arch", help="named architecture or layer string like 32C3-P2-128-10")
    p.add_argument("--steps", "--T", dest="steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--coupling", choices=["none", "intra", "inter"])
    p.add_argument("--coupling-kernel", dest="coupling_kernel",
                   choices=["1x1", "3x3", "5x5", "3x3d2"])
    p.add_argument("--arith", choices=["mult", "add", "multiplicative", "additive"])
    p.add_argument("--bn", choices=["rftd", "td", "rfd", "none"])
    p.add_argument("--neuron", choices=["pcnn", "lif"])
    p.add_argument("--precision", choices=["single", "double"])
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=["mnist", "fashion", "cifar10", "synthetic"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--arch")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--coupling", choices=["none", "intra", "inter"])
    p.add_argument("--arith", choices=["mult", "add", "multiplicative", "additive"])
    p.add_argument("--bn", choices=["rftd", "td", "rfd"])
    p.add_argument("--neuron", choices=["pcnn", "lif"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dynamics", help="simulate one or two neurons and dump traces")
    p.add_argument("--neuron", choices=["pcnn", "lif"], default="pcnn")
    p.add_argument("--coupled", action="store_true", help="simulate a coupled pair")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--stimulus", type=float, default=0.6)
    p.add_argument("--coupling-weight", dest="coupling_weight", type=float, default=2.0)
    p.add_argument("--alpha-f", dest="alpha_f", type=float, default=0.5)
    p.add_argument("--alpha-l", dest="alpha_l", type=float, default=0.5)
    p.add_argument("--alpha-e", dest="alpha_e", type=float, default=0.7)
    p.add_argument("--v-e", dest="v_e", type=float, default=1.0)
    p.add_argument("--lif-decay", dest="lif_decay", type=float, default=0.5)
    p.add_argument("--lif-threshold", dest="lif_threshold", type=float, default=1.0)
    p.add_argument("--out", default="runs/dynamics")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("noise", help="accuracy under input noise or neuron silencing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=["mnist", "fashion", "cifar10", "synthetic"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--mode", required=True, choices=["gaussian", "silencing"])
    p.add_argument("--levels", required=True, help="comma-separated noise levels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/noise")
    p.set_defaults(func=cmd_noise)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError, DataError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
