"""Command-line harness: data generation, training, evaluation,
gradient verification, and embedding export.

Configuration is a JSON file with sections (data, augment, model,
train, loss, sinkhorn, eval) whose defaults are the committed
desk-scale values; unknown keys are rejected.  Flags override file
values.  The config path can also come from the CROSSPROTO_CONFIG
environment variable.  Exit codes: 0 success, 1 runtime failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, gradcheck, trainer
from .data import AugmentationSpec, SyntheticSpec, load_dataset, save_dataset
from .fileio import FileFormatError
from .losses import LossConfig
from .model import embed
from .sinkhorn import SinkhornConfig

CONFIG_ENV_VAR = "CROSSPROTO_CONFIG"

SECTIONS = {
    "data": SyntheticSpec,
    "augment": AugmentationSpec,
    "model": trainer.ModelConfig,
    "train": trainer.TrainConfig,
    "loss": LossConfig,
    "sinkhorn": SinkhornConfig,
}

EVAL_DEFAULTS = {
    "ks": [1, 5, 10, 20],
    "probe_reg": 1e-2,
    "probe_max_iter": 3000,
    "k_eval": None,
    "use_head": False,
}

_TUPLE_FIELDS = {"factor_split", "view_dims", "hidden_dims"}


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


def load_config(path: str | None) -> dict:
    """Defaults merged with the JSON file at `path` (or $CROSSPROTO_CONFIG)."""
    cfg = {name: dataclasses.asdict(cls()) for name, cls in SECTIONS.items()}
    cfg["eval"] = dict(EVAL_DEFAULTS)
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(user, dict):
        raise UsageError(f"config root must be an object, got {type(user).__name__}")
    for section, values in user.items():
        if section not in cfg:
            raise UsageError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise UsageError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise UsageError(f"unknown config key {section}.{key}")
            cfg[section][key] = value
    return cfg


def build_section(cfg: dict, section: str):
    """Instantiate a section dataclass, converting JSON lists to tuples."""
    values = dict(cfg[section])
    for key in _TUPLE_FIELDS:
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    try:
        return SECTIONS[section](**values)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid {section} config: {e}")


def _set(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg[section][key] = value


def _parse_factor_split(text: str):
    try:
        a, b = text.lower().split("x")
        return (int(a), int(b))
    except ValueError:
        raise UsageError(f"factor split must look like '4x2', got {text!r}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def test_sibling(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".test" + p.suffix)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    _set(cfg, "data", "seed", args.seed)
    _set(cfg, "data", "num_classes", args.classes)
    _set(cfg, "data", "samples_per_class", args.samples_per_class)
    _set(cfg, "data", "test_samples_per_class", args.test_samples_per_class)
    if args.factor_split:
        cfg["data"]["factor_split"] = _parse_factor_split(args.factor_split)
    spec = build_section(cfg, "data")

    train_ds, test_ds = data_mod.generate(spec)
    out = Path(args.output)
    test_out = Path(args.test_output) if args.test_output else test_sibling(out)
    save_dataset(train_ds, out)
    save_dataset(test_ds, test_out)

    report = {
        "train_file": str(out), "test_file": str(test_out),
        "train_sha256": sha256_file(out), "test_sha256": sha256_file(test_out),
        "num_classes": spec.num_classes, "factor_split": list(spec.factor_split),
        "train_samples": train_ds.num_samples, "test_samples": test_ds.num_samples,
        "view_dims": list(spec.view_dims),
    }
    if not args.skip_oracle:
        report["factor_separability"] = factor_separability(train_ds, test_ds, spec)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def factor_separability(train_ds, test_ds, spec) -> dict:
    """Probe raw views against each factor; the own/other gap is the
    complementary-information guarantee the generator promises."""
    fa_tr, fb_tr = data_mod.factor_labels(train_ds.labels, spec.factor_split)
    fa_te, fb_te = data_mod.factor_labels(test_ds.labels, spec.factor_split)
    out = {}
    for stream, (xtr, xte), own, other in (
        (1, (train_ds.x1, test_ds.x1), (fa_tr, fa_te), (fb_tr, fb_te)),
        (2, (train_ds.x2, test_ds.x2), (fb_tr, fb_te), (fa_tr, fa_te)),
    ):
        own_acc = evaluation.linear_probe(xtr, own[0], xte, own[1], reg=1e-3)
        other_acc = evaluation.linear_probe(xtr, other[0], xte, other[1], reg=1e-3)
        out[f"stream{stream}"] = {
            "own_factor_acc": own_acc,
            "other_factor_acc": other_acc,
            "gap": own_acc - other_acc,
        }
    return out


def _apply_train_flags(cfg: dict, args) -> None:
    _set(cfg, "train", "seed", args.seed)
    _set(cfg, "train", "batch_size", args.batch_size)
    _set(cfg, "train", "lr", args.lr)
    _set(cfg, "train", "stage1_epochs", args.stage1_epochs)
    _set(cfg, "train", "cycle_epochs", args.cycle_epochs)
    _set(cfg, "train", "cycles", args.cycles)
    _set(cfg, "train", "queue_len", args.queue_len)
    _set(cfg, "model", "num_prototypes", args.num_prototypes)
    if args.mode == "infonce":
        cfg["train"]["stage1_loss"] = "infonce"
    if args.fresh_prototypes:
        cfg["train"]["fresh_prototypes"] = True
    for item in args.ablation or []:
        if "=" not in item:
            raise UsageError(f"--ablation expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key == "assignment-views":
            cfg["loss"]["assignment_views"] = (
                "other_stream_only" if value == "other-stream" else "both_streams")
        elif key == "prediction-views":
            cfg["loss"]["prediction_views"] = (
                "other_stream_only" if value == "other-stream" else "all_others")
        elif key == "targets":
            if value not in trainer.TARGET_MODES:
                raise UsageError(f"targets ablation must be one of {trainer.TARGET_MODES}")
            cfg["train"]["target_mode"] = value
        else:
            raise UsageError(f"unknown ablation {key!r}")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_train_flags(cfg, args)
    tcfg = build_section(cfg, "train")
    mcfg = build_section(cfg, "model")
    loss_cfg = build_section(cfg, "loss")
    sink_cfg = build_section(cfg, "sinkhorn")
    aug = build_section(cfg, "augment")

    train_ds = load_dataset(args.data)
    test_path = args.test_data or test_sibling(args.data)
    test_ds = load_dataset(test_path)

    state = None
    if args.stage == "cross":
        if not args.init:
            raise UsageError("--stage cross needs --init with a stage-1 checkpoint")
        state = trainer.load_checkpoint(args.init, queue_len=tcfg.queue_len)

    if args.stage == "stage1":
        state = trainer.init_state((train_ds.x1.shape[0], train_ds.x2.shape[0]),
                                   mcfg, tcfg)
        log: list = []
        trainer.train_single_stream(state, 1, train_ds, tcfg, loss_cfg, sink_cfg,
                                    aug, phase_index=0, log=log)
        rec = {"kind": "phase", "phase": "stage1_s1"}
        rec.update(trainer.phase_retrieval(state, train_ds, test_ds))
        log.append(rec)
        trainer.train_single_stream(state, 2, train_ds, tcfg, loss_cfg, sink_cfg,
                                    aug, phase_index=1, log=log)
        rec = {"kind": "phase", "phase": "stage1_s2"}
        rec.update(trainer.phase_retrieval(state, train_ds, test_ds))
        log.append(rec)
    else:
        state, log = trainer.run_full_pipeline(
            train_ds, test_ds, mcfg, tcfg, loss_cfg, sink_cfg, aug,
            state=state, skip_stage1=(args.stage == "cross"))

    trainer.save_checkpoint(state, args.out)
    if args.log:
        trainer.write_metric_log(log, args.log)
    for rec in log:
        if rec.get("kind") == "phase":
            print(json.dumps(rec, sort_keys=True))
    return 0


def _load_state_for_eval(args, tcfg) -> trainer.TrainState:
    if args.random_init:
        train_ds = load_dataset(args.data)
        mcfg = trainer.ModelConfig()
        return trainer.init_state((train_ds.x1.shape[0], train_ds.x2.shape[0]),
                                  mcfg, tcfg)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --random-init)")
    return trainer.load_checkpoint(args.checkpoint)


def _threaded_similarities(train_feats, test_feats, threads: int):
    if threads <= 1:
        return evaluation.similarity_matrix(train_feats, test_feats)
    n = test_feats.shape[1]
    chunk = max(1, (n + threads - 1) // threads)
    blocks = [test_feats[:, i:i + chunk] for i in range(0, n, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda b: evaluation.similarity_matrix(train_feats, b), blocks))
    return np.hstack(parts)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.use_head:
        cfg["eval"]["use_head"] = True
    if args.k_eval is not None:
        cfg["eval"]["k_eval"] = args.k_eval
    ecfg = cfg["eval"]
    tcfg = build_section(cfg, "train")

    state = _load_state_for_eval(args, tcfg)
    train_ds = load_dataset(args.data)
    test_path = args.test_data or test_sibling(args.data)
    test_ds = load_dataset(test_path)
    use_head = bool(ecfg["use_head"])

    feats = {
        "train1": embed(state.enc1, train_ds.x1, use_head=use_head),
        "test1": embed(state.enc1, test_ds.x1, use_head=use_head),
        "train2": embed(state.enc2, train_ds.x2, use_head=use_head),
        "test2": embed(state.enc2, test_ds.x2, use_head=use_head),
    }
    report: dict = {"streams": args.streams, "use_head": use_head}

    want = {"retrieval", "probe", "cluster"} if args.report == "all" else {args.report}
    ks = tuple(ecfg["ks"])

    if "retrieval" in want:
        sims1 = _threaded_similarities(feats["train1"], feats["test1"], args.threads)
        sims2 = _threaded_similarities(feats["train2"], feats["test2"], args.threads)
        picked = {"rgb": sims1, "flow": sims2,
                  "both": evaluation.combine_streams(sims1, sims2)}[args.streams]
        report["retrieval"] = {
            f"R@{k}": v for k, v in evaluation.retrieval_from_similarities(
                picked, train_ds.labels, test_ds.labels, ks).items()
        }

    if "probe" in want:
        reg, max_iter = ecfg["probe_reg"], ecfg["probe_max_iter"]
        if args.streams in ("rgb", "flow"):
            s = "1" if args.streams == "rgb" else "2"
            acc = evaluation.linear_probe(feats[f"train{s}"], train_ds.labels,
                                          feats[f"test{s}"], test_ds.labels,
                                          reg=reg, max_iter=max_iter)
        else:
            w1 = evaluation.fit_logistic(feats["train1"], train_ds.labels,
                                         reg=reg, max_iter=max_iter)
            w2 = evaluation.fit_logistic(feats["train2"], train_ds.labels,
                                         reg=reg, max_iter=max_iter)
            proba = evaluation.combine_streams(
                evaluation.predict_proba(w1, feats["test1"]),
                evaluation.predict_proba(w2, feats["test2"]))
            acc = float((proba.argmax(axis=0) == test_ds.labels).mean())
        report["probe"] = {"top1": acc}

    if "cluster" in want:
        k_eval = ecfg["k_eval"] or train_ds.num_classes
        # cluster metrics live in projection space regardless of the
        # retrieval feature choice: prototypes multiply head outputs
        z_tr1 = embed(state.enc1, train_ds.x1, use_head=True)
        z_te1 = embed(state.enc1, test_ds.x1, use_head=True)
        z_tr2 = embed(state.enc2, train_ds.x2, use_head=True)
        z_te2 = embed(state.enc2, test_ds.x2, use_head=True)
        cluster = {}
        pairs = {"rgb": (z_tr1, z_te1), "flow": (z_tr2, z_te2)}
        chosen = ("rgb", "flow") if args.streams == "both" else (args.streams,)
        for name in chosen:
            z_tr, z_te = pairs[name]
            bank = evaluation.fit_eval_prototypes(z_tr, k_eval,
                                                  seed=tcfg.seed)
            ids = evaluation.hard_assignments(z_te, bank)
            cluster[name] = evaluation.cluster_eval(ids, test_ds.labels,
                                                    k_eval).to_dict()
        report["cluster"] = cluster

    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    if args.csv:
        _write_report_csv(report, args.csv)
    print(text)
    return 0


def _write_report_csv(report: dict, path) -> None:
    lines = []
    if "retrieval" in report:
        keys = sorted(report["retrieval"], key=lambda s: int(s.split("@")[1]))
        lines.append("metric," + ",".join(keys))
        lines.append("recall," + ",".join(f"{report['retrieval'][k]:.4f}" for k in keys))
    if "probe" in report:
        lines.append("probe_top1," + f"{report['probe']['top1']:.4f}")
    if "cluster" in report:
        lines.append("stream,acc,nmi,ari,mean_entropy,max_purity")
        for name, row in report["cluster"].items():
            lines.append(name + "," + ",".join(
                f"{row[k]:.4f}" for k in ("acc", "nmi", "ari", "mean_entropy", "max_purity")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_grad_check(args) -> int:
    modes = gradcheck.MODES if args.mode == "all" else (args.mode,)
    results = gradcheck.run_checks(modes=modes, seeds=range(args.seeds),
                                   tol=args.tolerance,
                                   sign_flip=args.inject_sign_flip)
    worst = max(results, key=lambda r: r.max_rel_err)
    failures = [r for r in results if not r.passed]
    print(f"{len(results)} gradient checks, max rel err "
          f"{worst.max_rel_err:.3e} ({worst.mode} seed {worst.seed} "
          f"depth {worst.depth} {worst.parameter})")
    for r in failures:
        print(f"FAIL {r.mode} seed={r.seed} depth={r.depth} {r.parameter}: "
              f"rel err {r.max_rel_err:.3e} > {r.tolerance:.1e}")
    print("grad-check: " + ("FAIL" if failures else "PASS"))
    return 1 if failures else 0


def cmd_export_embeddings(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    f1 = embed(state.enc1, ds.x1, use_head=args.use_head)
    f2 = embed(state.enc2, ds.x2, use_head=args.use_head)
    out = data_mod.TwoStreamDataset(
        x1=np.ascontiguousarray(f1.astype("<f4").astype(np.float64)),
        x2=np.ascontiguousarray(f2.astype("<f4").astype(np.float64)),
        labels=ds.labels,
    )
    save_dataset(out, args.output)
    print(json.dumps({"file": str(args.output), "samples": out.num_samples,
                      "dims": [f1.shape[0], f2.shape[0]],
                      "sha256": sha256_file(args.output)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossproto",
        description="Two-stream prototype-contrastive training and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic two-view dataset")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["default"], default="default")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--factor-split")
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--test-samples-per-class", type=int)
    p.add_argument("--skip-oracle", action="store_true",
                   help="skip the factor-separability probe")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--test-output")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the training pipeline")
    p.add_argument("--config")
    p.add_argument("--stage", choices=["full", "stage1", "cross"], default="full")
    p.add_argument("--mode", choices=["proto", "infonce"], default="proto")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--init", help="checkpoint to resume from (--stage cross)")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--cycle-epochs", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--queue-len", type=int)
    p.add_argument("--num-prototypes", type=int)
    p.add_argument("--fresh-prototypes", action="store_true")
    p.add_argument("--ablation", action="append",
                   help="assignment-views=/prediction-views=/targets= variants")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true",
                   help="evaluate an untrained encoder instead of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--report", choices=["retrieval", "probe", "cluster", "all"],
                   default="all")
    p.add_argument("--streams", choices=["rgb", "flow", "both"], default="both")
    p.add_argument("--k-eval", type=int)
    p.add_argument("--use-head", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--output")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="verify analytic gradients")
    p.add_argument("--mode", choices=["all", *gradcheck.MODES], default="all")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-sign-flip", action="store_true",
                   help="debug hook: corrupt one gradient to prove detection")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-embeddings", help="write features+labels as a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--use-head", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileFormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
