"""Command-line entry point.

Subcommands: infer (sharded inference with a byte-exact comms ledger), bench
(analytical latency sweep), verify (numerical checks of the two
distributional claims), train (toy fine-tuning run), ablate (noise-scale and
class-token-mode grid).  Every run writes its CSV outputs plus a
run_manifest.json into the configured output directory; stdout carries a
single summary line, diagnostics go to stderr.

Exit codes: 0 success, 1 internal error, 2 configuration error, 3 protocol /
lifecycle error, 4 theorem verification failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import os
import sys
from fractions import Fraction

import numpy as np

from . import __version__
from .cluster import partition_tokens, run_inference
from .comms import CommsConfig, MethodSpec, bench_csv, breakdown_long_csv, speedup_table
from .config import config_digest, load_config
from .errors import (ConfigError, IndexCorruptionError, LifecycleError, ModeError,
                     PlanError, ProtocolError)
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .theorems import GaussianSpec, verify_theorem1, verify_theorem2
from .train import (AblationSettings, TrainConfig, ablation_csv, evaluate_classifier,
                    evaluate_lm, initialize_codebooks, make_classify_data,
                    make_lm_data, run_ablation, summarize_ablation, summary_text,
                    train)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_THEOREM = 4


def _write(out_dir: str, name: str, text: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _manifest(out_dir: str, command: str, cfg: dict, outputs: list[str]) -> None:
    manifest = {
        "schema_version": cfg["schema_version"],
        "command": command,
        "config_sha256": config_digest(cfg),
        "seed": cfg.get("seed"),
        "package_version": __version__,
        "outputs": sorted(outputs),
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _write(out_dir, "run_manifest.json",
           json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _from_config(builder, *args, **kwargs):
    """Constructor whose validation failures are the user's problem."""
    try:
        return builder(*args, **kwargs)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e))


def _build_model(cfg: dict) -> ModelConfig:
    return _from_config(ModelConfig, **cfg["model"])


def _prepared_params(cfg: dict, mcfg: ModelConfig):
    """Model parameters with codebooks: from a checkpoint when given,
    otherwise seeded weights with codebooks fitted on synthetic captures."""
    if cfg["checkpoint"]:
        try:
            with open(cfg["checkpoint"], "rb") as fh:
                blob = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read checkpoint: {e}")
        return _from_config(load_checkpoint, blob)
    seed = cfg["seed"]
    params = init_params(mcfg, seed=seed)
    if mcfg.causal:
        data = make_lm_data(mcfg.vocab_or_classes, cfg["tokens"], 8,
                            seed=seed, task_seed=seed)
        initialize_codebooks(params, data, "lm", mcfg.codebook_size, mcfg.groups,
                             seed=seed)
    else:
        data = make_classify_data(mcfg.hidden, cfg["tokens"], 8,
                                  seed=seed, task_seed=seed)
        initialize_codebooks(params, data, "classify",
                             mcfg.codebook_size, mcfg.groups, seed=seed)
    return params


def cmd_infer(cfg: dict) -> int:
    mcfg = _build_model(cfg)
    mode = cfg["mode"]
    if mode not in ("classify", "generate"):
        raise ConfigError(f"mode must be classify or generate, got {mode!r}")
    if mode == "classify" and mcfg.causal:
        raise ConfigError("classify needs a non-causal model config")
    if mode == "generate" and not mcfg.causal:
        raise ConfigError("generate needs a causal model config")
    if mode == "generate" and cfg["tokens"] + cfg["steps"] > mcfg.max_tokens:
        raise ConfigError(
            f"tokens + steps = {cfg['tokens'] + cfg['steps']} exceeds "
            f"model.max_tokens = {mcfg.max_tokens}")
    params = _prepared_params(cfg, mcfg)
    seed = cfg["seed"]
    plan = partition_tokens(cfg["tokens"], cfg["devices"],
                            class_replication=not mcfg.causal)
    if mode == "classify":
        xs, _ = make_classify_data(mcfg.hidden, cfg["tokens"], 1,
                                   seed=seed + 1, task_seed=seed)
        inputs = xs[0]
    else:
        inputs = make_lm_data(mcfg.vocab_or_classes, cfg["tokens"], 1,
                              seed=seed + 1, task_seed=seed)[0][:cfg["tokens"]]
    result = run_inference(params, plan, inputs, mode, steps=cfg["steps"],
                           workers=cfg["workers"], cls_mode=cfg["cls_mode"])

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("position", "value"))
    if mode == "classify":
        for i, logit in enumerate(np.asarray(result.output).ravel()):
            writer.writerow((i, format(float(logit), ".10g")))
        headline = f"predicted={int(np.argmax(result.output))}"
    else:
        for i, token in enumerate(result.output):
            writer.writerow((i, int(token)))
        headline = f"generated={len(result.output)} tokens"

    out_dir = cfg["out_dir"]
    outputs = [
        _write(out_dir, "outputs.csv", buf.getvalue()),
        _write(out_dir, "ledger.csv", result.ledger.to_csv()),
    ]
    _manifest(out_dir, "infer", cfg, [os.path.basename(p) for p in outputs])
    total = result.ledger.total_bits_sent()
    per_token = result.ledger.bits_per_token(plan.tokens)
    print(f"infer {mode}: {headline}, ledger {total} bits "
          f"({per_token:g} bits/token) -> {out_dir}")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    c = cfg["comms"]
    comms = _from_config(
        CommsConfig,
        layers=c["layers"], hidden=c["hidden"], tokens=c["tokens"],
        devices=c["devices"],
        bandwidth_bps=Fraction(str(c["bandwidth_mbps"])) * 10**6,
        codebook_size=c["codebook_size"], groups=c["groups"],
        precision_bits=c["precision_bits"], msg_latency_s=c["msg_latency_s"],
        heads=c["heads"], mlp_expansion=c["mlp_expansion"],
        seconds_per_flop=c["seconds_per_flop"])
    unknown = [m for m in cfg["methods"] if m not in
               ("single", "astra", "sp", "tp", "bp_ag", "bp_sp")]
    if unknown:
        raise ConfigError(f"unknown methods: {unknown}")
    specs = [MethodSpec(m) for m in cfg["methods"]]
    rows = speedup_table(comms, specs, cfg["bandwidths_mbps"], cfg["devices"],
                         cfg["tokens"])
    out_dir = cfg["out_dir"]
    outputs = [
        _write(out_dir, "bench.csv", bench_csv(rows)),
        _write(out_dir, "breakdown_long.csv", breakdown_long_csv(rows)),
    ]
    _manifest(out_dir, "bench", cfg, [os.path.basename(p) for p in outputs])
    print(f"bench: {len(rows)} sweep rows over {len(cfg['methods'])} methods "
          f"-> {out_dir}")
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    seed = cfg["seed"]
    t1 = cfg["theorem1"]
    dim = t1["dim"]
    template = GaussianSpec(np.zeros(dim), np.ones(dim))
    rep1 = _from_config(verify_theorem1, template, t1["mean_scale"] * np.ones(dim),
                        t1["residual_var"], t1["lam"], t1["trials"], seed=seed)
    t2 = cfg["theorem2"]
    rep2 = _from_config(verify_theorem2, t2["tokens"], t2["dim"], t2["devices"],
                        t2["sigma"], t2["trials"], seed=seed,
                        tolerance=t2["tolerance"])

    lines = [
        f"noise-augmentation W2 claim: {rep1.instances} instances, "
        f"{rep1.violations} violations, {rep1.ordering_violations} ordering "
        f"violations, mean-identity max error {rep1.mean_identity_max_error:.3e}, "
        f"min margin {rep1.margins.min():.3e}",
        f"replica-averaging claim (tolerance {rep2.tolerance:g}):",
    ]
    for n, got, want, ok in rep2.rows:
        lines.append(f"  devices={n}: measured {got:.6f}, expected {want:.6f}, "
                     f"{'ok' if ok else 'VIOLATION'}")
    verdict = "PASS" if (rep1.passed and rep2.passed) else "FAIL"
    lines.append(f"verdict: {verdict}")

    out_dir = cfg["out_dir"]
    outputs = [
        _write(out_dir, "theorem1.csv", rep1.to_csv()),
        _write(out_dir, "theorem2.csv", rep2.to_csv()),
        _write(out_dir, "report.txt", "\n".join(lines) + "\n"),
    ]
    _manifest(out_dir, "verify", cfg, [os.path.basename(p) for p in outputs])
    print(f"verify: claim1 {rep1.violations}/{rep1.instances} violations, "
          f"claim2 {'ok' if rep2.passed else 'violated'} -> {out_dir} [{verdict}]")
    return EXIT_OK if verdict == "PASS" else EXIT_THEOREM


def cmd_train(cfg: dict) -> int:
    mcfg = _build_model(cfg)
    task = cfg["task"]
    seed = cfg["seed"]
    if task == "classify" and mcfg.causal:
        raise ConfigError("classify training needs a non-causal model")
    if task == "lm" and not mcfg.causal:
        raise ConfigError("lm training needs a causal model")
    params = init_params(mcfg, seed=seed)
    tokens = cfg["tokens"]
    if task == "classify":
        train_set = make_classify_data(mcfg.hidden, tokens, cfg["train_count"],
                                       seed=seed, task_seed=seed)
        val_set = make_classify_data(mcfg.hidden, tokens, cfg["val_count"],
                                     seed=seed + 10_000, task_seed=seed)
        initialize_codebooks(params, train_set, "classify",
                             mcfg.codebook_size, mcfg.groups, seed=seed)
    else:
        train_set = make_lm_data(mcfg.vocab_or_classes, tokens, cfg["train_count"],
                                 seed=seed, task_seed=seed)
        val_set = make_lm_data(mcfg.vocab_or_classes, tokens, cfg["val_count"],
                               seed=seed + 10_000, task_seed=seed)
        initialize_codebooks(params, train_set, "lm", mcfg.codebook_size,
                             mcfg.groups, seed=seed)
    plan = partition_tokens(tokens, cfg["devices"],
                            class_replication=task == "classify")
    tcfg = _from_config(
        TrainConfig, task=task, beta=cfg["beta"], lam=cfg["lam"], lr=cfg["lr"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        seed=seed, cls_mode=cfg["cls_mode"],
        refresh_residual_stats=cfg["refresh_residual_stats"])
    history = train(params, plan, train_set, tcfg)
    if task == "classify":
        metric = "accuracy"
        train_metric = evaluate_classifier(params, plan, train_set, cfg["cls_mode"])
        val_metric = evaluate_classifier(params, plan, val_set, cfg["cls_mode"])
    else:
        metric = "perplexity"
        train_metric = evaluate_lm(params, plan, train_set)
        val_metric = evaluate_lm(params, plan, val_set)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("task", "split", "metric", "value"))
    writer.writerow((task, "train", metric, format(train_metric, ".6g")))
    writer.writerow((task, "val", metric, format(val_metric, ".6g")))
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    with open(ckpt_path, "wb") as fh:
        fh.write(save_checkpoint(params))
    outputs = [_write(out_dir, "metrics.csv", buf.getvalue()), ckpt_path]
    _manifest(out_dir, "train", cfg, [os.path.basename(p) for p in outputs])
    print(f"train {task}: final loss {history.final_loss:.4f}, "
          f"train {metric} {train_metric:.4f}, val {metric} {val_metric:.4f} "
          f"-> {out_dir}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    s = cfg["settings"]
    settings = _from_config(
        AblationSettings,
        hidden=s["hidden"], layers=s["layers"], heads=s["heads"],
        tokens=s["tokens"], devices=s["devices"],
        codebook_size=s["codebook_size"], lr=s["lr"], epochs=s["epochs"],
        batch_size=s["batch_size"], train_count=s["train_count"],
        val_count=s["val_count"], lams=tuple(s["lams"]),
        betas=tuple(s["betas"]), groups_set=tuple(s["groups_set"]),
        cls_modes=tuple(s["cls_modes"]), seeds=tuple(s["seeds"]))
    rows = run_ablation(settings)
    summary, contrasts = summarize_ablation(rows)
    out_dir = cfg["out_dir"]
    outputs = [
        _write(out_dir, "ablation.csv", ablation_csv(rows)),
        _write(out_dir, "summary.txt", summary_text(summary, contrasts)),
    ]
    _manifest(out_dir, "ablate", cfg, [os.path.basename(p) for p in outputs])
    shown = ", ".join(f"{k}={v:+.4f}" for k, v in sorted(contrasts.items()))
    print(f"ablate: {len(rows)} runs; {shown} -> {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "infer": cmd_infer,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "train": cmd_train,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqvq",
        description="Sequence-sharded Transformer inference with "
                    "vector-quantized index exchange.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("infer", "run sharded inference and write the comms ledger"),
            ("bench", "sweep the analytical latency model"),
            ("verify", "numerically check the two distributional claims"),
            ("train", "fine-tune on a synthetic task"),
            ("ablate", "run the noise/class-token ablation grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.overrides)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, PlanError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, LifecycleError, ModeError, IndexCorruptionError) as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except Exception:  # pragma: no cover - defensive
        import traceback

        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
