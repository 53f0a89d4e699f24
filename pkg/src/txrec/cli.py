"""Command-line entry point.

Subcommands cover the whole lifecycle: synthetic data, vocabulary building,
pretraining, two-stage finetuning, evaluation, item encoding, and top-K
recommendation. stdout carries machine-readable JSON only (evaluate and
recommend); everything human-facing goes to stderr. Exit codes: 0 success,
2 configuration problems, 3 data problems, 4 checkpoint problems.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import (Catalog, InputLimits, Vocabulary, build_model_input,
                      load_interactions_jsonl, load_items_jsonl)
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import Encoder, EncoderConfig, params_fingerprint
from .errors import CheckpointError, ConfigError, DataError
from .evaluator import (CSV_HEADER, EvalReport, cold_start_split, evaluate_cases,
                        leave_one_out)
from .objectives import LossConfig, MLMHead, cosine_scores
from .rng import stream
from .trainer import (ItemFeatureMatrix, TrainConfig, encode_all_items,
                      pretrain, two_stage_finetune)

log = logging.getLogger("txrec")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    seed: int = 0
    data_items: list[str] = field(default_factory=list)
    data_interactions: list[str] = field(default_factory=list)
    valid_items: list[str] = field(default_factory=list)
    valid_interactions: list[str] = field(default_factory=list)
    vocab_path: str | None = None
    log_path: str | None = None
    min_count: int = 1
    limits: InputLimits = field(default_factory=InputLimits)
    encoder: dict = field(default_factory=dict)
    encoder_given: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)


_ENCODER_KEYS = {"d": int, "n_layers": int, "n_heads": int, "window": int,
                 "ffn_dim": int, "max_tokens": int, "max_items": int, "dropout": float}
_TRAIN_KEYS = {"n_epochs": int, "pretrain_batch": int, "finetune_batch": int,
               "lr": float, "patience": int, "grad_clip": float}
_LOSS_KEYS = {"temperature": float, "mlm_weight": float}
_CATALOG_KEYS = {"tokens_per_field": int, "min_count": int}
_DATA_KEYS = ("items", "interactions", "valid_items", "valid_interactions")


def _typed(value, want, where: str, errors: list[str]):
    if want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    errors.append(f"{where}: expected {want.__name__}, got {value!r}")
    return None


def _section(raw: dict, name: str, keys: dict, errors: list[str]) -> dict:
    out = {}
    section = raw.get(name, {})
    if not isinstance(section, dict):
        errors.append(f"{name}: expected an object")
        return out
    for k, v in section.items():
        if k not in keys:
            errors.append(f"unknown config key '{name}.{k}'")
            continue
        typed = _typed(v, keys[k], f"{name}.{k}", errors)
        if typed is not None:
            out[k] = typed
    return out


def _path_list(value, where: str, errors: list[str]) -> list[str]:
    if isinstance(value, str):
        return [value]
    if isinstance(value, list) and all(isinstance(x, str) for x in value):
        return list(value)
    errors.append(f"{where}: expected a path or list of paths")
    return []


def validate_run_config(raw: dict) -> RunConfig:
    """Check every key and value; report all problems at once."""
    errors: list[str] = []
    known_top = {"seed", "vocab", "log", "data", "catalog", "encoder", "train", "loss"}
    for k in raw:
        if k not in known_top:
            errors.append(f"unknown config key '{k}'")

    cfg = RunConfig()
    if "seed" in raw:
        seed = _typed(raw["seed"], int, "seed", errors)
        if seed is not None:
            cfg.seed = seed
    for opt in ("vocab", "log"):
        if opt in raw and raw[opt] is not None:
            if isinstance(raw[opt], str):
                setattr(cfg, f"{opt}_path", raw[opt])
            else:
                errors.append(f"{opt}: expected a path string")

    data = raw.get("data", {})
    if not isinstance(data, dict):
        errors.append("data: expected an object")
        data = {}
    for k in data:
        if k not in _DATA_KEYS:
            errors.append(f"unknown config key 'data.{k}'")
    if "items" in data:
        cfg.data_items = _path_list(data["items"], "data.items", errors)
    if "interactions" in data:
        cfg.data_interactions = _path_list(data["interactions"], "data.interactions", errors)
    if "valid_items" in data:
        cfg.valid_items = _path_list(data["valid_items"], "data.valid_items", errors)
    if "valid_interactions" in data:
        cfg.valid_interactions = _path_list(data["valid_interactions"],
                                            "data.valid_interactions", errors)

    cat = _section(raw, "catalog", _CATALOG_KEYS, errors)
    enc = _section(raw, "encoder", _ENCODER_KEYS, errors)
    trn = _section(raw, "train", _TRAIN_KEYS, errors)
    lss = _section(raw, "loss", _LOSS_KEYS, errors)

    if not errors:
        try:
            cfg.min_count = cat.get("min_count", 1)
            cfg.limits = InputLimits(
                max_tokens=enc.get("max_tokens", 1024),
                max_items=enc.get("max_items", 50),
                tokens_per_field=cat.get("tokens_per_field", 16),
            )
            cfg.encoder = enc
            cfg.encoder_given = "encoder" in raw
            cfg.train = TrainConfig(**trn)
            cfg.loss = LossConfig(**lss)
            if cfg.min_count < 1:
                errors.append(f"catalog.min_count={cfg.min_count} must be >= 1")
        except ValueError as e:
            errors.append(str(e))
    if errors:
        raise ConfigError("\n".join(errors))
    return cfg


def load_run_config(path: str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return validate_run_config(raw)


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _save_model_ckpt(path: str, encoder: Encoder, vocab: Vocabulary,
                     limits: InputLimits, loss_cfg: LossConfig, seed: int,
                     head: MLMHead | None = None,
                     matrix: ItemFeatureMatrix | None = None) -> None:
    config = {
        "kind": "model",
        "encoder": encoder.config.to_dict(),
        "limits": {"max_tokens": limits.max_tokens, "max_items": limits.max_items,
                   "tokens_per_field": limits.tokens_per_field},
        "loss": {"temperature": loss_cfg.temperature, "mlm_weight": loss_cfg.mlm_weight},
        "seed": seed,
        "vocab_tokens": vocab.token_list(),
        "item_ids": matrix.ids if matrix is not None else None,
        "fingerprint": params_fingerprint(encoder.parameters()),
    }
    tensors = dict(encoder.state_dict())
    if head is not None:
        tensors.update(head.state_dict())
    if matrix is not None:
        tensors["item_matrix"] = matrix.rows
    save_checkpoint(path, config, tensors)


def _load_model_ckpt(path: str):
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint (kind={config.get('kind')!r})")
    try:
        enc_cfg = EncoderConfig(**config["encoder"])
        vocab = Vocabulary(config["vocab_tokens"])
        limits = InputLimits(**config["limits"])
        loss_cfg = LossConfig(**config["loss"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed model config ({e})") from None
    encoder = Encoder(enc_cfg, rng=stream(0, "init"))
    try:
        encoder.load_state_dict(tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    head = None
    if "mlm.w_h" in tensors:
        head = MLMHead(enc_cfg.d, enc_cfg.vocab_size, rng=stream(0, "init"))
        try:
            head.load_state_dict(tensors)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: {e}") from None
    matrix = None
    if config.get("item_ids"):
        if "item_matrix" not in tensors:
            raise CheckpointError(f"{path}: item ids present but matrix tensor missing")
        matrix = ItemFeatureMatrix(config["item_ids"], tensors["item_matrix"],
                                   config.get("fingerprint", ""))
    return config, encoder, head, vocab, limits, loss_cfg, matrix


def _load_item_matrix(path: str) -> ItemFeatureMatrix:
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "item_matrix":
        raise CheckpointError(f"{path} is not an item-matrix file (kind={config.get('kind')!r})")
    try:
        return ItemFeatureMatrix(config["item_ids"], tensors["rows"],
                                 config.get("fingerprint", ""))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed item matrix ({e})") from None


def _load_corpus(item_paths: list[str], interaction_paths: list[str]):
    items = []
    for p in item_paths:
        items.extend(load_items_jsonl(p))
    seqs = []
    for p in interaction_paths:
        seqs.extend(load_interactions_jsonl(p))
    return Catalog(items), items, seqs


def _epoch_logger(log_path: str | None):
    fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def write(record: dict) -> None:
        line = json.dumps(record)
        print(line, file=sys.stderr)
        if fh:
            fh.write(line + "\n")
            fh.flush()

    return write


# ---------------------------------------------------------------------------
# commands


def cmd_make_synthetic(args) -> int:
    from .synthetic import SyntheticSpec, write_corpus

    try:
        spec = SyntheticSpec(seed=args.seed, n_domains=args.domains,
                             items_per_domain=args.items_per_domain,
                             users_per_domain=args.users,
                             cold_fraction=args.cold_fraction)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    dirs = write_corpus(args.out, spec)
    for d in dirs:
        log.info("wrote %s", d)
    return 0


def cmd_build_vocab(args) -> int:
    if args.min_count < 1:
        raise ConfigError(f"--min-count must be >= 1, got {args.min_count}")
    items = []
    for p in args.items:
        items.extend(load_items_jsonl(p))
    if not items:
        raise DataError("no items to build a vocabulary from")
    vocab = Vocabulary.build(items, min_count=args.min_count)
    vocab.save(args.out)
    log.info("vocabulary of %d tokens (plus reserved) -> %s", len(vocab.token_list()), args.out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    if not cfg.data_items or not cfg.data_interactions:
        raise ConfigError("pretrain needs data.items and data.interactions")
    catalog, items, seqs = _load_corpus(cfg.data_items, cfg.data_interactions)
    valid_seqs = None
    if cfg.valid_interactions:
        _, _, valid_seqs = _load_corpus([], cfg.valid_interactions)
    vocab = Vocabulary.load(cfg.vocab_path) if cfg.vocab_path else \
        Vocabulary.build(items, min_count=cfg.min_count)
    enc_kwargs = dict(cfg.encoder)
    enc_kwargs["vocab_size"] = vocab.size
    try:
        enc_cfg = EncoderConfig(**enc_kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    init_rng = stream(cfg.seed, "init")
    encoder = Encoder(enc_cfg, rng=init_rng)
    head = MLMHead(enc_cfg.d, vocab.size, rng=init_rng)
    log.info("pretraining on %d sequences over %d items (vocab %d)",
             len(seqs), len(catalog), vocab.size)
    try:
        pretrain(seqs, catalog, vocab, encoder, head, cfg.train, cfg.loss,
                 cfg.limits, valid_sequences=valid_seqs,
                 log_fn=_epoch_logger(cfg.log_path))
    except ValueError as e:
        raise DataError(str(e)) from None
    _save_model_ckpt(args.out, encoder, vocab, cfg.limits, cfg.loss, cfg.seed, head=head)
    log.info("saved %s", args.out)
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    if not cfg.data_items or not cfg.data_interactions:
        raise ConfigError("finetune needs data.items and data.interactions")
    _, encoder, head, vocab, limits, ckpt_loss, _ = _load_model_ckpt(args.init)
    if cfg.encoder_given:
        want_d = cfg.encoder.get("d", encoder.config.d)
        if want_d != encoder.config.d:
            raise ConfigError(f"config asks for d={want_d} but checkpoint has d={encoder.config.d}")
    catalog, _, seqs = _load_corpus(cfg.data_items, cfg.data_interactions)
    split = leave_one_out(seqs)
    try:
        result = two_stage_finetune(split, catalog, vocab, encoder, cfg.train,
                                    cfg.loss, limits,
                                    log_fn=_epoch_logger(cfg.log_path))
    except ValueError as e:
        raise DataError(str(e)) from None
    _save_model_ckpt(args.out, encoder, vocab, limits, cfg.loss, cfg.seed,
                     matrix=result.item_matrix)
    log.info("best validation ndcg@10 %.4f; saved %s", result.best_metric, args.out)
    return 0


def _pick_matrix(args, encoder, catalog, vocab, limits,
                 stored: ItemFeatureMatrix | None) -> ItemFeatureMatrix:
    if getattr(args, "item_matrix", None):
        matrix = _load_item_matrix(args.item_matrix)
        if set(matrix.ids) != set(catalog.ids):
            raise DataError("item-matrix file does not cover the evaluation catalog")
        return matrix
    if stored is not None and set(stored.ids) == set(catalog.ids):
        return stored
    return encode_all_items(encoder, catalog, vocab, limits,
                            workers=getattr(args, "workers", 1))


def cmd_evaluate(args) -> int:
    _, encoder, _, vocab, limits, _, stored = _load_model_ckpt(args.ckpt)
    data = Path(args.data)
    catalog, _, seqs = _load_corpus([str(data / "items.jsonl")],
                                    [str(data / "interactions.jsonl")])
    split = leave_one_out(seqs)
    if not split.test:
        raise DataError("no users with enough interactions to evaluate")
    if args.zero_shot:
        # fresh re-encode with the untouched checkpoint, never a stored matrix
        matrix = encode_all_items(encoder, catalog, vocab, limits,
                                  workers=args.workers)
    else:
        matrix = _pick_matrix(args, encoder, catalog, vocab, limits, stored)
    base_protocol = "zero-shot" if args.zero_shot else "leave-one-out"
    reports: list[EvalReport] = []
    if args.cold_start:
        buckets = cold_start_split(seqs)
        payload = {}
        for name, cases in (("in_set", buckets.in_set), ("cold", buckets.cold)):
            if not cases:
                payload[name] = None
                continue
            rep = evaluate_cases(encoder, matrix.rows, matrix.index, cases, catalog,
                                 vocab, limits, fingerprint=matrix.fingerprint,
                                 protocol=f"{base_protocol}/cold-start/{name}")
            payload[name] = rep.to_dict()
            reports.append(rep)
        print(json.dumps(payload))
    else:
        rep = evaluate_cases(encoder, matrix.rows, matrix.index, split.test, catalog,
                             vocab, limits, fingerprint=matrix.fingerprint,
                             protocol=base_protocol)
        reports.append(rep)
        print(rep.to_json())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(CSV_HEADER + "\n")
            for rep in reports:
                fh.write(rep.csv_row() + "\n")
    return 0


def cmd_encode_items(args) -> int:
    _, encoder, _, vocab, limits, _, _ = _load_model_ckpt(args.ckpt)
    catalog, _, _ = _load_corpus([args.items], [])
    matrix = encode_all_items(encoder, catalog, vocab, limits, workers=args.workers)
    save_checkpoint(args.out, {
        "kind": "item_matrix",
        "item_ids": matrix.ids,
        "fingerprint": matrix.fingerprint,
        "d": encoder.config.d,
    }, {"rows": matrix.rows})
    log.info("encoded %d items -> %s", len(matrix.ids), args.out)
    return 0


def cmd_recommend(args) -> int:
    if args.topk < 1:
        raise ConfigError(f"--topk must be >= 1, got {args.topk}")
    _, encoder, _, vocab, limits, _, stored = _load_model_ckpt(args.ckpt)
    catalog, _, _ = _load_corpus([args.items], [])
    history = [s.strip() for s in args.history.split(",") if s.strip()]
    if not history:
        raise ConfigError("--history must name at least one item id")
    matrix = _pick_matrix(args, encoder, catalog, vocab, limits, stored)
    x = build_model_input(history, catalog, vocab, limits)
    scores = cosine_scores(encoder.sequence_repr(x), matrix.rows)
    order = sorted(range(len(matrix.ids)), key=lambda i: (-scores[i], matrix.ids[i]))
    top = order[: min(args.topk, len(order))]
    print(json.dumps([{"item_id": matrix.ids[i], "score": float(scores[i])} for i in top]))
    return 0


# ---------------------------------------------------------------------------
# wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="txrec",
                                     description="Text-only sequential recommender.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a multi-domain synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--items-per-domain", type=int, default=50)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--cold-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("build-vocab", help="build a token vocabulary from item files")
    p.add_argument("--items", action="append", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="contrastive + masked-token pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="two-stage finetuning from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="leave-one-out ranking metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory with items.jsonl and interactions.jsonl")
    p.add_argument("--item-matrix", default=None, help="precomputed item matrix file")
    p.add_argument("--zero-shot", action="store_true",
                   help="ignore any stored matrix; encode the catalog fresh, no training")
    p.add_argument("--cold-start", action="store_true")
    p.add_argument("--csv", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("encode-items", help="encode a catalog into an item matrix file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_encode_items)

    p = sub.add_parser("recommend", help="top-K items for a comma-separated history")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--item-matrix", default=None)
    p.set_defaults(func=cmd_recommend)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
