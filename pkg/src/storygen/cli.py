"""Command-line surface: synth-data, pretrain-lm, train, generate, eval,
gradcheck.

Every command accepts ``--config FILE`` (flat ``key = value`` lines, ``#``
comments); explicit flags override file values. ``STORYGEN_DATA_ROOT``
provides the default ``--data``. Exit codes: 0 ok, 1 user error, 2
internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2


class UserError(Exception):
    """Bad input from the operator (missing file, bad flag combination)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this CLI reserves 2 for internal
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


def parse_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise UserError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in stripped.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def apply_config_file(args: argparse.Namespace, parser_defaults: dict) -> None:
    """File values fill any argument still at its parser default."""
    if not getattr(args, "config", None):
        return
    file_values = parse_config_file(args.config)
    for key, raw in file_values.items():
        if not hasattr(args, key):
            continue
        current = getattr(args, key)
        if key in parser_defaults and current == parser_defaults[key]:
            setattr(args, key, _coerce(raw, parser_defaults[key]))


def _add_common(p: _Parser):
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--data", default=os.environ.get("STORYGEN_DATA_ROOT"),
                   help="dataset root (default: $STORYGEN_DATA_ROOT)")
    p.add_argument("--d-feat", dest="d_feat", type=int, default=64)
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int, default=0)


def _add_decode_flags(p: _Parser):
    p.add_argument("--strategy", default="beam",
                   choices=("beam", "top_k", "nucleus", "simctg"))
    p.add_argument("--max-len", dest="max_len", type=int, default=30)
    p.add_argument("--num-beams", dest="num_beams", type=int, default=5)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--simctg-k", dest="simctg_k", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="storygen",
                     description="context-aware visual storytelling via prefix "
                                 "tuning, at desk scale")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.subparsers = {}

    def add_parser(name, **kw):
        p = sub.add_parser(name, **kw)
        parser.subparsers[name] = p
        return p

    p = add_parser("synth-data", help="write a toy dataset")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-albums", dest="n_albums", type=int, default=64)
    p.add_argument("--out", required=True)

    p = add_parser("pretrain-lm", help="pretrain and freeze the toy LM")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--preset", default=None,
                   choices=("small", "medium", "large", "xl"))
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=64)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=2)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=4)
    p.add_argument("--max-positions", dest="max_positions", type=int, default=128)
    p.add_argument("--out", required=True)

    p = add_parser("train", help="train the mapping network")
    _add_common(p)
    p.add_argument("--lm", required=True, help="frozen LM checkpoint")
    p.add_argument("--out", required=True, help="mapping checkpoint to write")
    p.add_argument("--metrics-log", dest="metrics_log", default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=50)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--n-nll", dest="n_nll", type=int, default=6)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=1e-4)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=1300)
    p.add_argument("--context-mode", dest="context_mode", default="before",
                   choices=("none", "before", "after"))
    p.add_argument("--l", dest="context_sentences", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-curriculum", dest="curriculum", action="store_false")
    p.add_argument("--prefix-len", dest="prefix_len", type=int, default=20)
    p.add_argument("--input-slots", dest="input_slots", type=int, default=20)
    p.add_argument("--mn-layers", dest="mn_layers", type=int, default=2)
    p.add_argument("--mn-heads", dest="mn_heads", type=int, default=4)
    p.add_argument("--paper-shape", dest="paper_shape", action="store_true",
                   help="8 mapping layers with 8 heads")
    p.add_argument("--include-positive-in-denominator",
                   dest="include_positive_in_denominator", action="store_true")

    p = add_parser("generate", help="decode stories for a split")
    _add_common(p)
    p.add_argument("--lm", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--context-mode", dest="context_mode", default="before",
                   choices=("none", "before", "after"))
    p.add_argument("--l", dest="context_sentences", type=int, default=1)
    p.add_argument("--features", default=None,
                   help="optional precomputed feature JSONL")
    p.add_argument("--out", required=True)
    _add_decode_flags(p)

    p = add_parser("eval", help="degeneration/grounding report for stories")
    _add_common(p)
    p.add_argument("--stories", required=True, help="generation JSONL")
    p.add_argument("--lm", default=None, help="LM checkpoint for perplexity")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--table", action="store_true", help="print aligned table")
    p.add_argument("--bridge-sentences", dest="bridge_sentences",
                   action="store_true")
    p.add_argument("--pooled", action="store_true",
                   help="also report corpus-pooled rep-n")

    p = add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.add_argument("--paper-shape", dest="paper_shape", action="store_true")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=4,
                   help="sampled coordinates per parameter")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# command bodies
# ---------------------------------------------------------------------------

def _require_data(args) -> Path:
    if not args.data:
        raise UserError("no dataset root: pass --data or set STORYGEN_DATA_ROOT")
    root = Path(args.data)
    if not root.exists():
        raise UserError(f"dataset root {root} does not exist")
    return root


def _load_world(args):
    from .data import load_dataset
    from .encoder import FrozenEncoder
    splits = load_dataset(_require_data(args))
    encoder = FrozenEncoder(d_feat=args.d_feat, seed=args.encoder_seed,
                            vocab=splits.vocab)
    return splits, encoder


def cmd_synth_data(args) -> int:
    from .data import save_dataset, synthesize_toy_dataset
    splits = synthesize_toy_dataset(seed=args.seed, n_albums=args.n_albums,
                                    encoder_seed=args.encoder_seed,
                                    d_feat=args.d_feat)
    save_dataset(splits, args.out)
    print(f"wrote {args.out}: {splits.counts()} (vocab {len(splits.vocab)})")
    return EXIT_OK


def cmd_pretrain_lm(args) -> int:
    from .lm import LmConfig
    from .training import pretrain_lm
    splits, _ = _load_world(args)
    config = None
    if args.preset:
        config = LmConfig.preset(args.preset, vocab_size=max(len(splits.vocab), 8),
                                 max_positions=args.max_positions)
    start = time.time()
    lm = pretrain_lm(splits, lm_config=config, seed=args.seed, epochs=args.epochs,
                     lr=args.lr, batch_size=args.batch_size,
                     embed_dim=args.embed_dim, n_layers=args.n_layers,
                     n_heads=args.n_heads, max_positions=args.max_positions)
    lm.save(args.out)
    print(f"wrote {args.out} (config {lm.config}, {time.time() - start:.1f}s)")
    return EXIT_OK


def _mapping_config(args, lm, encoder):
    from .mapping import MappingConfig
    if args.paper_shape:
        return MappingConfig.paper_shape(d_feat=encoder.d_feat,
                                         embed_dim=lm.config.embed_dim,
                                         prefix_len=args.prefix_len,
                                         input_slots=args.input_slots)
    return MappingConfig(d_feat=encoder.d_feat, embed_dim=lm.config.embed_dim,
                         prefix_len=args.prefix_len, input_slots=args.input_slots,
                         n_layers=args.mn_layers, n_heads=args.mn_heads)


def cmd_train(args) -> int:
    from .lm import FrozenLm
    from .training import TrainConfig, train
    splits, encoder = _load_world(args)
    lm = FrozenLm.load(args.lm)
    config = TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, n_nll=args.n_nll,
        lambda_=args.lambda_, tau=args.tau, lr=args.lr,
        weight_decay=args.weight_decay, warmup_steps=args.warmup_steps,
        context_mode=args.context_mode, context_sentences=args.context_sentences,
        seed=args.seed, curriculum=args.curriculum,
        include_positive_in_denominator=args.include_positive_in_denominator)
    start = time.time()
    result = train(config, splits, lm, encoder,
                   mapping_config=_mapping_config(args, lm, encoder),
                   checkpoint_path=args.out, metrics_log_path=args.metrics_log)
    last = result.reports[-1]
    print(f"wrote {args.out}: {len(result.reports)} epochs, "
          f"final nll {last.nll:.4f} ({time.time() - start:.1f}s)")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .decoding import DecodeConfig, generate_story, write_stories_jsonl
    from .encoder import load_features
    from .lm import FrozenLm
    from .mapping import MappingNetwork
    splits, encoder = _load_world(args)
    lm = FrozenLm.load(args.lm)
    mapping = MappingNetwork.load(args.mapping)
    if mapping.config.embed_dim != lm.config.embed_dim:
        raise UserError(
            f"checkpoint dims differ: mapping embed_dim {mapping.config.embed_dim}"
            f" vs LM embed_dim {lm.config.embed_dim}")
    if mapping.config.d_feat != encoder.d_feat:
        raise UserError(
            f"checkpoint dims differ: mapping d_feat {mapping.config.d_feat}"
            f" vs encoder d_feat {encoder.d_feat}")
    features = None
    if args.features:
        features = load_features(args.features, d_feat=encoder.d_feat)
    cfg = DecodeConfig(strategy=args.strategy, max_len=args.max_len,
                       num_beams=args.num_beams, k=args.k, p=args.p,
                       simctg_k=args.simctg_k, alpha=args.alpha,
                       temperature=args.temperature, seed=args.seed)
    stories = []
    for album in splits.sis(args.split):
        stories.append(generate_story(
            lm, mapping, encoder, album.image_ids, album.album_title,
            album.album_description, cfg, context_mode=args.context_mode,
            context_sentences=args.context_sentences, vocab=splits.vocab,
            features=features, sequence_id=album.album_id))
    write_stories_jsonl(stories, args.out)
    print(f"wrote {args.out}: {len(stories)} stories ({args.strategy})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .decoding import read_stories_jsonl
    from .lm import FrozenLm
    from .metrics import corpus_eval, evaluate_story, render_table
    splits, encoder = _load_world(args)
    records = read_stories_jsonl(args.stories)
    if not records:
        raise UserError(f"{args.stories}: no stories")
    lm = FrozenLm.load(args.lm) if args.lm else None
    albums = {a.album_id: a for split in ("train", "val", "test")
              for a in splits.sis(split)}
    metrics = []
    token_lists = []
    for rec in records:
        sentence_tokens = [splits.vocab.encode(text) for text in rec["sentences"]]
        album = albums.get(rec["sequence_id"])
        image_ids = album.image_ids if album else None
        metrics.append(evaluate_story(
            sentence_tokens, image_ids, encoder=encoder, lm=lm,
            sequence_id=rec["sequence_id"],
            bridge_sentences=args.bridge_sentences))
        token_lists.append(sentence_tokens)
    report = corpus_eval(metrics,
                         pooled_counts=token_lists if args.pooled else None,
                         bridge_sentences=args.bridge_sentences)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    if args.table or not args.out:
        print(render_table(report, label=records[0].get("strategy", "model")))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import autodiff as ad
    from .data import synthesize_toy_dataset
    from .encoder import FrozenEncoder
    from .lm import EOS_ID, FrozenLm, LmConfig
    from .mapping import MappingConfig, MappingNetwork, assemble_input
    from .training import infonce_loss, nll_loss

    d_feat = 16
    encoder = FrozenEncoder(d_feat=d_feat, seed=args.encoder_seed)
    lm = FrozenLm.init(LmConfig(vocab_size=31, embed_dim=32, n_layers=2,
                                n_heads=4, max_positions=96), seed=1).freeze()
    if args.paper_shape:
        mn_config = MappingConfig.paper_shape(d_feat=d_feat, embed_dim=32,
                                              prefix_len=8, input_slots=8)
    else:
        mn_config = MappingConfig(d_feat=d_feat, embed_dim=32, prefix_len=4,
                                  input_slots=4, n_layers=2, n_heads=4)
    mapping = MappingNetwork.init(mn_config, seed=args.seed)
    v1 = encoder.encode_image("gradcheck_img_a")
    v2 = encoder.encode_image("gradcheck_img_b")
    ctx = encoder.encode_words(["one", "two"])
    targets_a = [5, 9, 12, EOS_ID]
    targets_b = [7, 4, EOS_ID]
    context_tokens = [8, 6]

    def nll_concat_before():
        asm = assemble_input(mapping.map_prefix_with_context(v1, ctx), None,
                             targets_a, lm)
        out = lm.forward(asm.embeddings)
        return nll_loss(out.logits, targets_a, asm.target_mask)

    def nll_concat_after():
        prefix = mapping.map_prefix(v1)
        ctext = mapping.build_context_after(context_tokens, lm)
        asm = assemble_input(prefix, ctext, targets_a, lm)
        out = lm.forward(asm.embeddings)
        return nll_loss(out.logits, targets_a, asm.target_mask)

    def nll_plus_infonce():
        reps = []
        nll_total = None
        for v, targets in ((v1, targets_a), (v2, targets_b)):
            asm = assemble_input(mapping.map_prefix(v), None, targets, lm)
            out = lm.forward(asm.embeddings)
            term = nll_loss(out.logits, targets, asm.target_mask)
            nll_total = term if nll_total is None else ad.add(nll_total, term)
            reps.append(ad.reshape(
                mapping.project_text(out.final_hidden, asm.target_mask), (1, -1)))
        contras = infonce_loss(np.stack([v1, v2]), ad.concat_rows(reps), tau=1.0)
        return ad.add(ad.scale(nll_total, 0.5), ad.scale(contras, 0.3))

    checks = (("nll, context fused before the trunk", nll_concat_before),
              ("nll, context appended after the prefix", nll_concat_after),
              ("nll + infonce", nll_plus_infonce))
    start = time.time()
    worst = 0.0
    for label, fn in checks:
        res = ad.grad_check(fn, mapping.trainable_parameters(), step=args.step,
                            rng=np.random.default_rng(args.seed),
                            max_coords_per_param=args.coords)
        print(f"{label}: max relative error {res.max_rel_error:.3e} "
              f"({res.n_coords} coordinates)")
        if res.non_finite:
            print(f"  non-finite evaluations: {res.non_finite[:3]}")
            return EXIT_INTERNAL
        worst = max(worst, res.max_rel_error)
    print(f"worst {worst:.3e} (threshold {args.threshold:.1e}, "
          f"{time.time() - start:.1f}s)")
    return EXIT_OK if worst < args.threshold else EXIT_INTERNAL


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("STORYGEN_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command_parser = parser.subparsers[args.command]
        defaults = {key: command_parser.get_default(key) for key in vars(args)}
        apply_config_file(args, defaults)
        return COMMANDS[args.command](args)
    except UserError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, ValueError, KeyError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USER
    except Exception as err:  # pragma: no cover - internal faults
        logger.exception("internal error")
        print(f"internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
