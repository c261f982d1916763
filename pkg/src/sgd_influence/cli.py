"""Command-line interface.

Every subcommand reads an optional ``key = value`` config file
(``--config``) and ``--set key=value`` overrides. Exit status: 0 success,
1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND
from .cache import CheckpointPolicy, cache_stats, human_bytes, measured_stats, read_cache
from .config import GENERATOR_KEYS, KEYS, ConfigError, RunConfig, load_config
from .dataset import Dataset, DatasetError, load_csv
from .influence import InfluenceMode, lie_backward, query_from_validation
from .model import ModelSpec
from .oracle import exhaustive_loo, rank_agreement, write_oracle_csv
from .pipeline import BlobsProtocol, CleanseConfig, TrialData, cleanse_once, cleanse_sweep, format_pm, recall
from .trainer import TrainConfig, train

log = logging.getLogger("sgd_influence")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig, **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "backend": BACKEND,
        "config": cfg.as_text(),
        **extra,
    }
    path = out / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_ds(cfg: RunConfig, key: str, required: bool = True) -> Dataset | None:
    path = cfg[key]
    if path is None:
        if required:
            raise UsageError(f"missing dataset path: set '{key} = <file>' in the config or pass --set {key}=<file>")
        return None
    if Path(path).suffix == ".csv":
        return load_csv(path, label_column=cfg.label_column, header=cfg.header)
    return Dataset.load(path)


def _spec_for(cfg: RunConfig, ds: Dataset, n_classes: int | None = None) -> ModelSpec:
    return ModelSpec(ds.d, cfg.hidden, n_classes or ds.n_classes, cfg.activation)


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed, cfg.policy, cfg.width)


def _protocol(cfg: RunConfig) -> BlobsProtocol:
    return BlobsProtocol(cfg.n_train, cfg.n_val, cfg.n_test, cfg.classes, cfg.dim,
                         cfg.separation, cfg.noise_rate, cfg.data_seed)


def _data_source(cfg: RunConfig):
    """Fixed files when ``train`` is configured, else the generated protocol."""
    if cfg.train is not None:
        clash = sorted(k for k in GENERATOR_KEYS if k in cfg.explicit)
        if clash:
            raise UsageError(f"conflicting options: dataset file 'train' given together with generator keys {clash}; "
                             "drop one of them")
        tr, va, te = _load_ds(cfg, "train"), _load_ds(cfg, "val"), _load_ds(cfg, "test")
        n_classes = max(tr.n_classes, va.n_classes, te.n_classes)
        return TrialData(tr, va, te), n_classes, tr.d
    return _protocol(cfg), cfg.classes, cfg.dim


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trial = _protocol(cfg)(cfg.seed)
    ext = ".csv" if args.format == "csv" else ".icds"
    for name in ("train", "val", "test"):
        getattr(trial, name).save(out / f"{name}{ext}")
    (out / "noise.json").write_text(json.dumps(
        {"rate": trial.noise.rate, "seed": trial.noise.seed, "flipped_ids": sorted(trial.noise.flipped_ids)}) + "\n")
    print(f"wrote train/val/test{ext} ({len(trial.train)}/{len(trial.val)}/{len(trial.test)} instances) to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _load_ds(cfg, "train")
    val = _load_ds(cfg, "val", required=False)
    spec = _spec_for(cfg, ds, max(ds.n_classes, val.n_classes if val else 0))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cache_path = Path(cfg.cache) if cfg.cache else out / "train.icch"
    tcfg = _train_cfg(cfg)
    res = train(spec, ds, tcfg, cache_path=cache_path, val=val)
    res.log.to_csv(out / "trainlog.csv")
    theta_sha = hashlib.sha256(res.theta.astype("<f8").tobytes()).hexdigest()
    payload_sha = hashlib.sha256(res.cache.payload_bytes()).hexdigest()
    _write_manifest(out, "train", cfg, model=spec.describe(), cache=str(cache_path),
                    cache_sha256=_sha256(cache_path), payload_sha256=payload_sha, theta_sha256=theta_sha)
    print(f"model {spec.describe()}, p={spec.n_params}")
    print(f"final train loss {res.log.train_loss[-1]:.6f}, train acc {res.log.train_acc[-1]:.4f}")
    print(f"cache {cache_path} ({human_bytes(cache_path.stat().st_size)}, policy {tcfg.policy.value})")
    print(f"theta sha256 {theta_sha}")
    print(f"payload sha256 {payload_sha}")
    return 0


def cmd_influence(args, cfg: RunConfig) -> int:
    cache_path = args.cache or cfg.cache
    if cache_path is None:
        raise UsageError("missing cache: pass --cache <file> or set 'cache = <file>'")
    mode = InfluenceMode(args.mode) if args.mode else cfg.mode
    ds = _load_ds(cfg, "train")
    val = _load_ds(cfg, "val")
    cache = read_cache(cache_path)
    spec = ModelSpec(ds.d, cfg.hidden, cache.header.n_classes, cfg.activation)
    query = query_from_validation(spec, cache.final_params(), val)
    scores = lie_backward(spec, cache, ds, query, mode, window=cfg.window)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"scores_{mode.value}.csv"
    scores.to_csv(csv_path)
    _write_manifest(out, "influence", cfg, cache=str(cache_path), cache_sha256=_sha256(cache_path),
                    mode=mode.value, query=query.origin, steps_traced=scores.steps_traced,
                    scores_sha256=_sha256(csv_path))
    neg = int(np.sum(scores.values < 0))
    print(f"{len(scores)} scores ({mode.value}, {scores.steps_traced} steps traced), {neg} negative -> {csv_path}")
    return 0


def cmd_cleanse(args, cfg: RunConfig) -> int:
    source, n_classes, d = _data_source(cfg)
    strategy = args.strategy or cfg.strategy
    n = cfg.n if args.n is None else args.n
    trial = source(cfg.seed) if callable(source) else source
    spec = ModelSpec(d, cfg.hidden, n_classes, cfg.activation)
    res = cleanse_once(spec, trial.train, trial.val, trial.test, _train_cfg(cfg), strategy, n, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"accuracy": res.accuracy, "removed_ids": list(res.removed_ids)}
    if trial.noise is not None:
        extra["recall"] = recall(res.removed_ids, trial.noise)
    _write_manifest(out, "cleanse", cfg, **extra)
    print(f"strategy {getattr(strategy, 'value', strategy)}, removed {n}: test accuracy {res.accuracy:.4f}")
    return 0


def _default_removal_counts(n: int) -> tuple[int, ...]:
    return tuple(sorted({int(round(f * n)) for f in (0.0, 0.01, 0.02, 0.05, 0.10, 0.20)}))


def cmd_sweep(args, cfg: RunConfig) -> int:
    source, n_classes, d = _data_source(cfg)
    n_train = len(source.train) if isinstance(source, TrialData) else cfg.n_train
    counts = cfg.removal_counts or _default_removal_counts(n_train)
    ccfg = CleanseConfig(counts, cfg.n_seeds, cfg.strategies, _train_cfg(cfg), cfg.batch_sizes, cfg.base_seed)
    spec = ModelSpec(d, cfg.hidden, n_classes, cfg.activation)
    curve = cleanse_sweep(spec, ccfg, source)
    out = Path(cfg.out)
    paths = curve.write(out)
    _write_manifest(out, "sweep", cfg, outputs={k: str(p) for k, p in paths.items()},
                    checksums={k: _sha256(p) for k, p in paths.items()}, failed_cells=len(curve.failures))
    print(f"{'strategy':<22}{'batch':>6}{'n':>6}  accuracy (mean ± std)")
    for s, b, n, m, sd in curve.aggregate():
        print(f"{s:<22}{b:>6}{n:>6}  {format_pm(m, sd)}")
    if curve.failures:
        print(f"{len(curve.failures)} cells failed, see {paths['failures']}", file=sys.stderr)
        return 2
    return 0


def cmd_oracle(args, cfg: RunConfig) -> int:
    ds = _load_ds(cfg, "train")
    val = _load_ds(cfg, "val")
    spec = _spec_for(cfg, ds, max(ds.n_classes, val.n_classes))
    window = cfg.window
    policy = CheckpointPolicy.ALL if window == "full" else CheckpointPolicy.LAST_EPOCH
    tcfg = _train_cfg(cfg).with_(policy=policy)
    res = train(spec, ds, tcfg)
    query = query_from_validation(spec, res.cache.final_params(), val)
    stored = lie_backward(spec, res.cache, ds, query, InfluenceMode.STORED_PARAMS, window=window)
    final = lie_backward(spec, res.cache, ds, query, InfluenceMode.FINAL_PARAMS_ONLY, window=window)
    truth = exhaustive_loo(spec, ds, val, tcfg, res.schedule, query, window, res.cache)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_oracle_csv(out / "oracle.csv", truth, stored, final)
    a_s = rank_agreement(stored, truth)
    a_f = rank_agreement(final, truth)
    _write_manifest(out, "oracle", cfg, stored=vars_of(a_s), final_only=vars_of(a_f))
    for name, a in (("stored", a_s), ("final_only", a_f)):
        print(f"{name:<11} kendall_tau={a.kendall_tau:.4f} pearson={a.pearson:.4f} sign_match={a.sign_match:.4f}")
    return 0


def vars_of(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


def cmd_cache_stats(args, cfg: RunConfig) -> int:
    if args.cache is None and None in (args.params, args.steps, args.epochs):
        raise UsageError("cache-stats needs --params, --steps and --epochs, or --cache <file>")
    if args.params is not None and None not in (args.params, args.steps, args.epochs):
        print(f"idealized checkpoint payload (p={args.params}, T={args.steps}, k={args.epochs}, width={args.width})")
        for policy in CheckpointPolicy:
            st = cache_stats(args.params, args.steps, args.epochs, args.width, policy)
            print(f"  {policy.value:<11} {st.checkpoint_payload_bytes:>16d} bytes  {human_bytes(st.checkpoint_payload_bytes):>10}"
                  f"  ratio vs last_epoch {Fraction(st.n_checkpoints, args.steps)}")
    if args.cache is not None:
        cache = read_cache(args.cache)
        st = measured_stats(cache)
        h = cache.header
        ideal = cache_stats(h.p, h.steps_per_epoch, h.epochs, h.width, h.policy).n_checkpoints
        print(f"measured {args.cache} (policy {h.policy.value}, p={h.p}, T={h.steps_per_epoch}, k={h.epochs})")
        print(f"  checkpoints   {st.n_checkpoints}")
        print(f"  payload       {st.checkpoint_payload_bytes} bytes ({human_bytes(st.checkpoint_payload_bytes)})")
        print(f"  step records  {st.step_record_bytes} bytes ({human_bytes(st.step_record_bytes)})")
        print(f"  total         {st.total_bytes} bytes ({human_bytes(st.total_bytes)})")
        print(f"  ratio vs last_epoch measured {Fraction(st.n_checkpoints, h.steps_per_epoch + 1)}"
              f" (T+1 stored), idealized {Fraction(ideal, h.steps_per_epoch)}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "influence": cmd_influence,
    "cleanse": cmd_cleanse,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "cache-stats": cmd_cache_stats,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgd-influence", description="SGD influence estimation and data cleansing")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", "-c", help="key = value config file")
        sp.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE",
                        help=f"override a config key; known keys: {', '.join(sorted(KEYS))}")
        sp.add_argument("--out", "-o", help="output directory (overrides 'out')")
        if name == "influence":
            sp.add_argument("--mode", choices=[m.value for m in InfluenceMode])
            sp.add_argument("--cache")
        if name == "cleanse":
            sp.add_argument("--strategy")
            sp.add_argument("--n", type=int)
        if name == "gen-data":
            sp.add_argument("--format", choices=["icds", "csv"], default="icds")
        if name == "cache-stats":
            sp.add_argument("--params", type=int)
            sp.add_argument("--steps", type=int)
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--width", type=int, default=4)
            sp.add_argument("--cache")
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.out:
        out["out"] = args.out
    return out


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"choose a subcommand: {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
