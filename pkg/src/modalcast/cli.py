"""Command-line entry point.

Commands: pca-extract, train, eval, zero-shot, export-attention.
Heavy imports happen after argument parsing so --threads can pin the
BLAS pool before numpy loads.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5
EXIT_USAGE = 6

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS/OMP thread count (default 1, deterministic)")
    common.add_argument("--device", default="cpu", help="compute device (cpu only)")

    parser = argparse.ArgumentParser(prog="modalcast",
                                     description="dual-branch cross-modal forecaster")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pca-extract", parents=[common],
                       help="compress a token-embedding dictionary offline")
    p.add_argument("--weights", required=True, help="weight container with token_embedding")
    p.add_argument("--d", type=int, required=True, help="number of principal components")
    p.add_argument("--out", required=True, help="output principal-embeddings container")
    p.add_argument("--unscaled", action="store_true",
                   help="keep components orthonormal instead of variance-scaled")

    p = sub.add_parser("train", parents=[common], help="train one model per horizon")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override out_dir")
    p.add_argument("--train-fraction", type=float, default=None,
                   help="train on this prefix fraction of the training split")
    p.add_argument("--no-feature-loss", action="store_true")
    p.add_argument("--no-output-loss", action="store_true")
    p.add_argument("--horizons", default=None, help="comma list overriding window.horizons")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints per horizon")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint file (single horizon) or run directory")
    p.add_argument("--out", default=None)

    p = sub.add_parser("zero-shot", parents=[common],
                       help="evaluate a trained checkpoint on a foreign dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-dataset", required=True)
    p.add_argument("--config", default=None,
                   help="defaults to resolved.conf next to the checkpoint")
    p.add_argument("--split", default=None, help="override dataset.split for the foreign set")
    p.add_argument("--out", default=None)

    p = sub.add_parser("export-attention", parents=[common],
                       help="export cross-attention maps and branch features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None, help="defaults to the config dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--words", default=None,
                   help="comma list or file of words (or vocab row indices)")
    p.add_argument("--vocab", default=None, help="token-per-line vocabulary sidecar")
    p.add_argument("--window-index", type=int, default=0,
                   help="which test window to export (default first)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = max(1, args.threads)
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(threads))

    from .errors import (ConfigError, DataError, FormatError, ModalcastError,
                         NumericError, UsageError)
    try:
        handler = {
            "pca-extract": _cmd_pca_extract,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "zero-shot": _cmd_zero_shot,
            "export-attention": _cmd_export_attention,
        }[args.command]
        handler(args)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ModalcastError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _cmd_pca_extract(args):
    from .match import (dictionary_from_container, extract_principal_embeddings,
                        save_principal)
    dictionary = dictionary_from_container(args.weights)
    pe = extract_principal_embeddings(dictionary, args.d, scaled=not args.unscaled)
    save_principal(pe, args.out)
    print(f"components={pe.d} explained_variance_ratio={pe.explained_variance_ratio:.6f}")
    cumulative = 0.0
    total = pe.explained_variance_ratio and float(pe.variances.sum()) / pe.explained_variance_ratio
    print("component,variance,cumulative_evr")
    for i, v in enumerate(pe.variances):
        cumulative += float(v)
        frac = cumulative / total if total else 1.0
        print(f"{i},{float(v):.8g},{frac:.6f}")
    print(f"wrote {args.out}")


def _load_run_pieces(cfg, horizon, seed, input_len=None):
    """Backbone + principal + freshly built model for one horizon."""
    import numpy as np

    from .backbone import BackboneConfig, load_backbone
    from .match import load_principal
    from .model import CrossModalForecaster, ModelOptions

    bb_cfg = BackboneConfig(layers=cfg.backbone_layers, width=cfg.backbone_width,
                            heads=cfg.backbone_heads,
                            max_positions=cfg.backbone_max_positions,
                            vocab_size=cfg.backbone_vocab,
                            causal_mask=cfg.backbone_causal)
    backbone = load_backbone(cfg.backbone_path, bb_cfg)
    principal = load_principal(cfg.principal_path)
    options = ModelOptions(input_len=input_len or cfg.input_len, horizon=horizon,
                           match_heads=cfg.match_heads, cross_heads=cfg.cross_heads,
                           cross_scale=cfg.cross_scale, lora_rank=cfg.lora_rank,
                           lora_alpha=cfg.lora_alpha, lora_targets=cfg.lora_targets)
    rng = np.random.default_rng(seed)
    model = CrossModalForecaster.build(backbone, principal, options, rng)
    return model


def _m4_horizon_groups(collection):
    """M4 heads are horizon-specific; split a collection accordingly."""
    from .data import M4Collection
    groups: dict = {}
    for s in collection.series:
        groups.setdefault(s.horizon, []).append(s)
    return {h: M4Collection(frequency=collection.frequency, series=series)
            for h, series in sorted(groups.items())}


def _resolve_sim(cfg):
    from .losses import SimSpec
    name = Path(cfg.dataset_path).stem if cfg.dataset_kind == "csv" else ""
    auto = SimSpec.for_dataset(cfg.dataset_kind, name)
    return SimSpec(
        sup_kind=auto.sup_kind if cfg.sup_kind == "auto" else cfg.sup_kind,
        feature_kind=auto.feature_kind if cfg.feature_kind == "auto" else cfg.feature_kind,
        output_kind=auto.output_kind if cfg.output_kind == "auto" else cfg.output_kind,
    )


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "train_fraction", None) is not None:
        cfg.train_fraction = args.train_fraction
    if getattr(args, "no_feature_loss", False):
        cfg.enable_feature = False
    if getattr(args, "no_output_loss", False):
        cfg.enable_output = False
    if getattr(args, "horizons", None):
        cfg.horizons = tuple(int(h) for h in args.horizons.split(","))
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    cfg.threads = max(1, args.threads)
    cfg.validate()
    return cfg


def _csv_views(cfg, dataset_path=None, split_mode=None):
    from .data import SplitSpec, load_csv, split
    dataset = load_csv(dataset_path or cfg.dataset_path)
    spec = SplitSpec.from_mode(split_mode or cfg.dataset_split, len(dataset),
                               few_shot_fraction=cfg.train_fraction)
    return dataset, split(dataset, spec)


def _train_cfg(cfg):
    from .trainer import TrainConfig
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
                       lr=cfg.lr, patience=cfg.patience,
                       enable_feature=cfg.enable_feature,
                       enable_output=cfg.enable_output,
                       stop_gradient_textual=cfg.stop_gradient_textual)


def _cmd_train(args):
    from .config import RunConfig
    from .data import WindowSpec, windows
    from .losses import LossWeights
    from .trainer import fit, m4_train_pairs

    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / "resolved.conf")
    weights = LossWeights(gamma=cfg.gamma, lambda1=cfg.lambda1, lambda2=cfg.lambda2)
    sim = _resolve_sim(cfg)
    tcfg = _train_cfg(cfg)
    log_path = out_dir / "train.log"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        def log(line):
            print(line)
            log_fh.write(line + "\n")

        if cfg.dataset_kind == "m4":
            from .data import load_m4
            collection = load_m4(cfg.dataset_path, cfg.dataset_frequency)
            log(f"m4 frequency={cfg.dataset_frequency} series={len(collection)}")
            for horizon, group in _m4_horizon_groups(collection).items():
                pairs = m4_train_pairs(group)
                tcfg.mase_season = group.series[0].season
                log(f"horizon={horizon} series={len(group)} train_windows={len(pairs)}")
                model = _load_run_pieces(cfg, horizon, cfg.seed,
                                         input_len=2 * horizon)
                result = fit(model, pairs, [], tcfg, sim, weights, log=log)
                ckpt = out_dir / f"model_m4_h{horizon}.calf"
                model.save_checkpoint(ckpt)
                log(f"horizon={horizon} optimizer_steps={result.optimizer_steps} "
                    f"checkpoint={ckpt}")
            return

        dataset, (train_view, val_view, _) = _csv_views(cfg)
        log(f"dataset={cfg.dataset_path} rows={len(dataset)} "
            f"channels={dataset.n_channels} train_rows={len(train_view)} "
            f"train_fraction={cfg.train_fraction}")
        for horizon in cfg.horizons:
            wspec = WindowSpec(cfg.input_len, horizon)
            train_pairs = list(windows(train_view, wspec))
            val_pairs = list(windows(val_view, wspec))
            log(f"horizon={horizon} train_windows={len(train_pairs)} "
                f"val_windows={len(val_pairs)}")
            model = _load_run_pieces(cfg, horizon, cfg.seed)
            result = fit(model, train_pairs, val_pairs, tcfg, sim, weights, log=log)
            ckpt = out_dir / f"model_h{horizon}.calf"
            model.save_checkpoint(ckpt)
            log(f"horizon={horizon} optimizer_steps={result.optimizer_steps} "
                f"best_val_mse={result.best_val:.6f} checkpoint={ckpt}")


def _checkpoint_for(args_checkpoint: str, horizon: int):
    from .errors import ConfigError
    path = Path(args_checkpoint)
    if path.is_dir():
        candidate = path / f"model_h{horizon}.calf"
        if not candidate.exists():
            raise ConfigError(f"no checkpoint for horizon {horizon} under {path}")
        return candidate
    return path


def _eval_run(cfg, checkpoint, out_dir, dataset_path=None, split_mode=None,
              optimizer_steps=0, tag="eval"):
    from .data import WindowSpec
    from .metrics import MetricReport
    from .trainer import evaluate

    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / "resolved.conf")
    _, (_, _, test_view) = _csv_views(cfg, dataset_path=dataset_path, split_mode=split_mode)
    report = MetricReport()
    for horizon in cfg.horizons:
        model = _load_run_pieces(cfg, horizon, cfg.seed)
        model.load_checkpoint(_checkpoint_for(checkpoint, horizon))
        values = evaluate(model, test_view, WindowSpec(cfg.input_len, horizon))
        count = values.pop("windows")
        report.add(horizon, values, count)
        print(f"horizon={horizon} " +
              " ".join(f"{k}={v:.6f}" for k, v in values.items()))
    print(report.to_text())
    print(f"optimizer_steps={optimizer_steps}")
    (out_dir / f"{tag}_metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out_dir / f"{tag}_metrics.txt").write_text(
        report.to_text() + f"\noptimizer_steps={optimizer_steps}\n", encoding="utf-8")
    return report


def _m4_eval_run(cfg, checkpoint, out_dir):
    from .data import load_m4
    from .trainer import m4_evaluate

    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / "resolved.conf")
    collection = load_m4(cfg.dataset_path, cfg.dataset_frequency)
    pooled = {"smape": 0.0, "mase": 0.0, "ref_smape": 0.0, "ref_mase": 0.0}
    total = 0
    lines = []
    for horizon, group in _m4_horizon_groups(collection).items():
        model = _load_run_pieces(cfg, horizon, cfg.seed, input_len=2 * horizon)
        path = Path(checkpoint)
        model.load_checkpoint(path / f"model_m4_h{horizon}.calf"
                              if path.is_dir() else path)
        values = m4_evaluate(model, group)
        n = values["series"]
        total += n
        for key in pooled:
            pooled[key] += values[key] * n
        lines.append(f"horizon={horizon} series={n} smape={values['smape']:.6f} "
                     f"mase={values['mase']:.6f} owa={values['owa']:.6f}")
    from .metrics import owa as owa_fn
    smape_v, mase_v = pooled["smape"] / total, pooled["mase"] / total
    owa_v = owa_fn(smape_v, mase_v, pooled["ref_smape"] / total,
                   pooled["ref_mase"] / total)
    lines.append(f"pooled series={total} smape={smape_v:.6f} mase={mase_v:.6f} "
                 f"owa={owa_v:.6f} owa_reference=seasonal-naive(approximate)")
    report = "\n".join(lines)
    print(report)
    (out_dir / "eval_metrics.txt").write_text(report + "\n", encoding="utf-8")
    csv_rows = ["metric,horizon,value"]
    for line in lines:
        fields = dict(f.split("=") for f in line.split() if "=" in f)
        tag = fields.get("horizon", "pooled")
        for metric in ("smape", "mase", "owa"):
            if metric in fields:
                csv_rows.append(f"{metric},{tag},{fields[metric]}")
    (out_dir / "eval_metrics.csv").write_text("\n".join(csv_rows) + "\n",
                                              encoding="utf-8")


def _cmd_eval(args):
    from .config import RunConfig
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    out_dir = Path(cfg.out_dir) if args.out is None else Path(args.out)
    if cfg.dataset_kind == "m4":
        _m4_eval_run(cfg, args.checkpoint, out_dir)
        return
    _eval_run(cfg, args.checkpoint, out_dir)


def _cmd_zero_shot(args):
    from .config import RunConfig
    from .errors import ConfigError

    ckpt = Path(args.checkpoint)
    config_path = args.config or (ckpt.parent if ckpt.is_file() else ckpt) / "resolved.conf"
    if not Path(config_path).exists():
        raise ConfigError(f"no config found at {config_path}; pass --config")
    cfg = _apply_overrides(RunConfig.from_file(config_path), args)
    if cfg.dataset_kind != "csv":
        raise ConfigError("zero-shot transfer is defined for csv datasets")
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir) / "zero_shot"
    cfg.out_dir = str(out_dir)
    # Zero gradient steps by contract: the checkpoint is evaluated as-is.
    _eval_run(cfg, args.checkpoint, out_dir, dataset_path=args.eval_dataset,
              split_mode=args.split, optimizer_steps=0, tag="zero_shot")


def _read_words(spec: str):
    path = Path(spec)
    if path.exists():
        return [w for w in path.read_text(encoding="utf-8").split() if w]
    return [w.strip() for w in spec.split(",") if w.strip()]


def _cmd_export_attention(args):
    import numpy as np

    from .config import RunConfig
    from .container import read_container
    from .data import WindowSpec, windows
    from .errors import ConfigError, UsageError
    from .match import cross_modal_match, word_relevance
    from .tensor import Tensor, no_grad
    from .trainer import make_batch

    ckpt = Path(args.checkpoint)
    config_path = args.config or (ckpt.parent if ckpt.is_file() else ckpt) / "resolved.conf"
    if not Path(config_path).exists():
        raise ConfigError(f"no config found at {config_path}; pass --config")
    cfg = RunConfig.from_file(config_path)
    if cfg.dataset_kind != "csv":
        raise ConfigError("export-attention expects a csv dataset run")
    if args.seed is not None:
        cfg.seed = args.seed
    horizon = cfg.horizons[0]
    model = _load_run_pieces(cfg, horizon, cfg.seed)
    model.load_checkpoint(_checkpoint_for(args.checkpoint, horizon))

    _, (_, _, test_view) = _csv_views(cfg, dataset_path=args.dataset)
    pairs = list(windows(test_view, WindowSpec(cfg.input_len, horizon)))
    if not 0 <= args.window_index < len(pairs):
        raise UsageError(f"--window-index {args.window_index} out of range "
                         f"[0, {len(pairs) - 1}]")
    batch = make_batch([pairs[args.window_index]], dtype=model.dtype)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    channels = test_view.channels

    with no_grad():
        window = Tensor(batch.normalized.astype(model.dtype))
        x_time = model.time_tokens(window)
        _, attn_map = cross_modal_match(x_time, model.principal, model.match)
        time_trace, text_trace, _ = model.forward_pair(window)

    attn = attn_map.data[0]
    _write_csv(out_dir / "attention_principal.csv",
               ["channel"] + [f"pc{j}" for j in range(attn.shape[1])],
               [[channels[i]] + [repr(float(v)) for v in row] for i, row in enumerate(attn)])

    penult = max(len(time_trace.features) - 2, 0)
    for tag, trace in (("time", time_trace), ("text", text_trace)):
        feats = trace.features[penult].data[0]
        _write_csv(out_dir / f"features_{tag}.csv",
                   ["channel"] + [f"f{j}" for j in range(feats.shape[1])],
                   [[channels[i]] + [repr(float(v)) for v in row]
                    for i, row in enumerate(feats)])

    if args.words:
        tokens = None
        if args.vocab:
            tokens = [line.rstrip("\n")
                      for line in Path(args.vocab).read_text(encoding="utf-8").splitlines()]
        table = read_container(cfg.backbone_path).get("token_embedding")
        if table is None:
            raise ConfigError(f"{cfg.backbone_path}: no token_embedding for word lookup")
        lookup = {tok: i for i, tok in enumerate(tokens)} if tokens else {}
        rows, kept, skipped = [], [], []
        for word in _read_words(args.words):
            if word in lookup:
                rows.append(table[lookup[word]])
                kept.append(word)
            elif word.isdigit() and int(word) < table.shape[0]:
                rows.append(table[int(word)])
                kept.append(word)
            else:
                skipped.append(word)
        if skipped:
            print(f"skipped words not in vocabulary: {', '.join(skipped)}")
        if not rows:
            raise UsageError("no usable words after vocabulary lookup")
        with no_grad():
            rel = word_relevance(x_time, np.stack(rows), model.match)
        rel_rows = rel.data[0]
        _write_csv(out_dir / "word_relevance.csv",
                   ["channel"] + kept,
                   [[channels[i]] + [repr(float(v)) for v in row]
                    for i, row in enumerate(rel_rows)])
    print(f"wrote attention exports to {out_dir}")


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(str(c) for c in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    sys.exit(main())
