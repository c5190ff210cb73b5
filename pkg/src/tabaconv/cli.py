"""Command line entry point: gen / pretrain / finetune / evaluate / gradcheck.

Exit codes: 0 success, 1 check failure, 2 configuration or input error,
3 runtime numeric failure. Every command takes --config (JSON file whose
keys mirror the flag names); explicit flags win over the file, the file
wins over built-in defaults. The fully resolved configuration is echoed
into the run directory as config.json.

Datasets are split 80/10/10 into train/val/test by user (first-appearance
order), never by window, so overlapping windows of one user cannot leak
across splits.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import synth
from .errors import (
    ConfigError,
    ContractError,
    IntegrityError,
    NumericError,
    SchemaError,
    UnsupportedVersionError,
)
from .masking import MaskConfig
from .model import ModelConfig
from .schema import (
    FeatureSchema,
    group_rows_by_user,
    infer_schema,
    load_roles,
    make_windows,
    read_csv,
    split_users,
    users_in_order,
)
from .tensor import use_dtype, grad_check
from .training import (
    Checkpoint,
    TrainConfig,
    evaluate,
    finetune,
    load_checkpoint,
    masked_batch,
    mdm_loss,
    pretrain,
    save_checkpoint,
)

_CONFIG_ERRORS = (ConfigError, SchemaError, ContractError, IntegrityError,
                  UnsupportedVersionError, FileNotFoundError, ValueError, KeyError)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return cfg


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    resolved.update(_load_config_file(getattr(args, "config", None)))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump({"command": command, **{k: str(v) if isinstance(v, Path) else v
                                          for k, v in resolved.items()}}, fh, indent=2)


def _write_metrics(out_dir: Path, records: list[dict]) -> None:
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _split_user_set(header, rows, user_column, split: str) -> set[str] | None:
    users = users_in_order(header, rows, user_column)
    if split == "all":
        return set(users)
    train, val, test = split_users(users)
    return set({"train": train, "val": val, "test": test}[split])


def _windows_for_split(csv_path, schema: FeatureSchema, split: str, window: int,
                       stride: int, mode: str):
    header, rows = read_csv(csv_path)
    keep = _split_user_set(header, rows, schema.user_column, split)
    rows = [r for r in rows if r[header.index(schema.user_column)] in keep]
    grouped = group_rows_by_user(header, rows, schema)
    return make_windows(schema, header, grouped, window=window, stride=stride, mode=mode)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

_GEN_DEFAULTS = dict(users=20, rows=100, fraud_rate=0.03, noise=0.05, seed=0,
                     merchants=12, categories=8, cities=10,
                     amount_mu=3.0, amount_sigma=1.0, out="data")


def cmd_gen(args) -> int:
    cfg = _resolve(args, _GEN_DEFAULTS)
    scfg = synth.SynthConfig(
        n_users=cfg["users"], rows_per_user=cfg["rows"], fraud_rate=cfg["fraud_rate"],
        label_noise=cfg["noise"], seed=cfg["seed"], n_merchants=cfg["merchants"],
        n_categories=cfg["categories"], n_cities=cfg["cities"],
        amount_mu=cfg["amount_mu"], amount_sigma=cfg["amount_sigma"],
    )
    out = Path(cfg["out"])
    csv_path, manifest_path = synth.generate(scfg, out)
    _echo_config(out, "gen", cfg)
    print(f"wrote {csv_path} and {manifest_path}")
    return 0


_MODEL_DEFAULTS = dict(d_model=64, heads=4, kernel=3, blocks=1, ffn_mult=4, dropout=0.1)

_PRETRAIN_DEFAULTS = dict(
    data=None, roles=None, out="runs/pretrain", split="train",
    window=10, stride=5, p_field=0.30, p_row=0.15, mask_seed=None,
    epochs=5, batch_size=32, lr=1e-3, seed=0, **_MODEL_DEFAULTS,
)


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(d_model=cfg["d_model"], n_heads=cfg["heads"], kernel_size=cfg["kernel"],
                       n_blocks=cfg["blocks"], ffn_mult=cfg["ffn_mult"], dropout=cfg["dropout"])


def cmd_pretrain(args) -> int:
    cfg = _resolve(args, _PRETRAIN_DEFAULTS)
    if cfg["data"] is None:
        raise ConfigError("--data is required")
    if cfg["p_field"] == 0 and cfg["p_row"] == 0:
        print("warning: p_field=0 and p_row=0 leave the reconstruction loss without targets",
              file=sys.stderr)
        return 2
    if cfg["mask_seed"] is None:
        cfg["mask_seed"] = cfg["seed"]
    data = Path(cfg["data"])
    roles_path = Path(cfg["roles"]) if cfg["roles"] else data.parent / "roles.json"
    roles = load_roles(roles_path)
    header, rows = read_csv(data)
    train_users = _split_user_set(header, rows, roles["user"], cfg["split"])
    schema = infer_schema(data, roles, include_users=train_users)
    samples = _windows_for_split(data, schema, cfg["split"], cfg["window"], cfg["stride"], "pretrain")
    mcfg = _model_config(cfg)
    tcfg = TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       learning_rate=cfg["lr"], seed=cfg["seed"], mode="pretrain")
    mask_cfg = MaskConfig(p_field=cfg["p_field"], p_row=cfg["p_row"], seed=cfg["mask_seed"])
    ckpt, records = pretrain(samples, schema, mcfg, tcfg, mask_cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    schema.save(out / "schema.json")
    save_checkpoint(ckpt, out / "ckpt.bin")
    _write_metrics(out, records)
    _echo_config(out, "pretrain", cfg)
    last = records[-1] if records else {"loss": float("nan")}
    print(f"pretrained on {len(samples)} windows; final epoch: {json.dumps(last)}")
    return 0


_FINETUNE_DEFAULTS = dict(
    ckpt=None, data=None, schema=None, out="runs/finetune", split="train", mode="finetune",
    window=10, stride=10, epochs=5, batch_size=32, lr=1e-3, seed=0,
)


def _load_ckpt_and_schema(cfg: dict) -> tuple[Checkpoint, FeatureSchema]:
    if cfg["ckpt"] is None:
        raise ConfigError("--ckpt is required")
    ckpt_path = Path(cfg["ckpt"])
    ckpt = load_checkpoint(ckpt_path)
    schema_path = Path(cfg["schema"]) if cfg["schema"] else ckpt_path.parent / "schema.json"
    schema = FeatureSchema.load(schema_path)
    if ckpt.schema_digest != schema.digest():
        raise ConfigError(
            f"schema digest mismatch: checkpoint {ckpt.schema_digest[:12]}... vs "
            f"{schema_path} {schema.digest()[:12]}..."
        )
    return ckpt, schema


def cmd_finetune(args) -> int:
    cfg = _resolve(args, _FINETUNE_DEFAULTS)
    if cfg["data"] is None:
        raise ConfigError("--data is required")
    ckpt, schema = _load_ckpt_and_schema(cfg)
    samples = _windows_for_split(Path(cfg["data"]), schema, cfg["split"],
                                 cfg["window"], cfg["stride"], "downstream")
    tcfg = TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       learning_rate=cfg["lr"], seed=cfg["seed"], mode=cfg["mode"])
    tuned, records = finetune(ckpt, samples, schema, tcfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    schema.save(out / "schema.json")
    save_checkpoint(tuned, out / "ckpt.bin")
    _write_metrics(out, records)
    _echo_config(out, "finetune", cfg)
    last = records[-1] if records else {}
    print(f"finetuned ({cfg['mode']}) on {len(samples)} windows; final epoch: {json.dumps(last)}")
    return 0


_EVALUATE_DEFAULTS = dict(ckpt=None, data=None, schema=None, out=None, split="test",
                          window=10, stride=10)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, _EVALUATE_DEFAULTS)
    if cfg["data"] is None:
        raise ConfigError("--data is required")
    ckpt, schema = _load_ckpt_and_schema(cfg)
    samples = _windows_for_split(Path(cfg["data"]), schema, cfg["split"],
                                 cfg["window"], cfg["stride"], "downstream")
    result = evaluate(ckpt, samples, schema)
    print(f"F1 {result['f1']:.4f} precision {result['precision']:.4f} "
          f"recall {result['recall']:.4f} (n={result['n']}, positives={result['positives']})")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(out, [result])
        _echo_config(out, "evaluate", cfg)
    return 0


_GRADCHECK_DEFAULTS = dict(tol=1e-4, h=1e-5, seed=0, max_coords=64)


def build_gradcheck_problem(seed: int):
    """Tiny end-to-end reconstruction loss on synthetic data, for checking."""
    from .model import forward_mdm, init_params

    with tempfile.TemporaryDirectory() as tmp:
        # labels are irrelevant to the reconstruction loss; rate 0 keeps tiny
        # datasets from tripping the reachability check
        scfg = synth.SynthConfig(n_users=3, rows_per_user=12, fraud_rate=0.0,
                                 label_noise=0.0, seed=seed, n_merchants=6,
                                 n_categories=4, n_cities=4)
        csv_path, _ = synth.generate(scfg, tmp)
        roles = synth.default_roles()
        schema = infer_schema(csv_path, roles)
        header, rows = read_csv(csv_path)
        grouped = group_rows_by_user(header, rows, schema)
        samples = make_windows(schema, header, grouped, window=6, stride=6,
                               mode="pretrain", float_dtype=np.float64)
    mcfg = ModelConfig(d_model=12, n_heads=2, kernel_size=3, n_blocks=1,
                       ffn_mult=2, dropout=0.0)
    mask_cfg = MaskConfig(p_field=0.3, p_row=0.15, seed=seed)
    batch = masked_batch(samples[:2], schema, mask_cfg, epoch=0, sample_indices=[0, 1])
    params = init_params(schema, mcfg, seed=seed, head="pretrain")

    def build_loss(p):
        preds, reg = forward_mdm(batch, p, mcfg, schema, dropout_rng=None)
        return mdm_loss(preds, batch, reg, schema)

    return build_loss, params


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, _GRADCHECK_DEFAULTS)
    with use_dtype("float64"):
        build_loss, params = build_gradcheck_problem(cfg["seed"])
        report = grad_check(build_loss, params, h=cfg["h"], tol=cfg["tol"],
                            max_coords=cfg["max_coords"], seed=cfg["seed"])
    print(report.summary())
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabaconv",
        description="Tabular time-series pretraining and fraud classification pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic labeled transaction CSV")
    gen.add_argument("--config", help="JSON config file (flags override it)")
    gen.add_argument("--users", type=int, help="number of users")
    gen.add_argument("--rows", type=int, help="rows per user")
    gen.add_argument("--fraud-rate", dest="fraud_rate", type=float, help="target rule rate (pre-noise)")
    gen.add_argument("--noise", type=float, help="label flip probability")
    gen.add_argument("--seed", type=int, help="generator seed")
    gen.add_argument("--merchants", type=int, help="merchant vocabulary size")
    gen.add_argument("--categories", type=int, help="category vocabulary size")
    gen.add_argument("--cities", type=int, help="city vocabulary size")
    gen.add_argument("--amount-mu", dest="amount_mu", type=float, help="log-amount mean")
    gen.add_argument("--amount-sigma", dest="amount_sigma", type=float, help="log-amount std")
    gen.add_argument("--out", help="output directory")
    gen.set_defaults(func=cmd_gen)

    pre = sub.add_parser("pretrain", help="infer schema, window the data, run reconstruction pretraining")
    pre.add_argument("--config")
    pre.add_argument("--data", help="input CSV")
    pre.add_argument("--roles", help="role config JSON (default: roles.json next to the data)")
    pre.add_argument("--out", help="run directory")
    pre.add_argument("--split", choices=["train", "val", "test", "all"], help="user split to train on")
    pre.add_argument("--window", type=int, help="window length")
    pre.add_argument("--stride", type=int, help="window stride")
    pre.add_argument("--p-field", dest="p_field", type=float, help="field mask probability")
    pre.add_argument("--p-row", dest="p_row", type=float, help="row mask probability")
    pre.add_argument("--mask-seed", dest="mask_seed", type=int, help="masking seed")
    pre.add_argument("--epochs", type=int)
    pre.add_argument("--batch-size", dest="batch_size", type=int)
    pre.add_argument("--lr", type=float, help="learning rate")
    pre.add_argument("--seed", type=int, help="training/init seed")
    pre.add_argument("--d-model", dest="d_model", type=int)
    pre.add_argument("--heads", type=int)
    pre.add_argument("--kernel", type=int, help="conv kernel size (odd)")
    pre.add_argument("--blocks", type=int, help="encoder blocks")
    pre.add_argument("--ffn-mult", dest="ffn_mult", type=int)
    pre.add_argument("--dropout", type=float)
    pre.set_defaults(func=cmd_pretrain)

    fin = sub.add_parser("finetune", help="train the binary classifier from a checkpoint (or scratch)")
    fin.add_argument("--config")
    fin.add_argument("--ckpt", help="pretraining checkpoint")
    fin.add_argument("--data", help="labeled CSV")
    fin.add_argument("--schema", help="schema JSON (default: schema.json next to the checkpoint)")
    fin.add_argument("--out", help="run directory")
    fin.add_argument("--split", choices=["train", "val", "test", "all"])
    fin.add_argument("--mode", choices=["finetune", "scratch"])
    fin.add_argument("--window", type=int)
    fin.add_argument("--stride", type=int)
    fin.add_argument("--epochs", type=int)
    fin.add_argument("--batch-size", dest="batch_size", type=int)
    fin.add_argument("--lr", type=float)
    fin.add_argument("--seed", type=int)
    fin.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("evaluate", help="report F1/precision/recall on a user split")
    ev.add_argument("--config")
    ev.add_argument("--ckpt", help="finetuned checkpoint")
    ev.add_argument("--data", help="labeled CSV")
    ev.add_argument("--schema", help="schema JSON (default: schema.json next to the checkpoint)")
    ev.add_argument("--out", help="optional directory for a metrics record")
    ev.add_argument("--split", choices=["train", "val", "test", "all"])
    ev.add_argument("--window", type=int)
    ev.add_argument("--stride", type=int)
    ev.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the whole model (float64)")
    gc.add_argument("--config")
    gc.add_argument("--tol", type=float, help="max relative error")
    gc.add_argument("--h", type=float, help="finite difference step")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--max-coords", dest="max_coords", type=int, help="coordinates checked per parameter")
    gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
