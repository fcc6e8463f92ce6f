"""Operator command line: train, index, query, evaluate, serve, featurize.

Every subcommand is deterministic given its flags and --seed; training
progress is emitted as JSON lines so scripts can parse it. Exit codes:
0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import captioner as cap
from . import embedding as emb
from . import evaluation as ev
from . import retrieval as ret
from . import service as svc
from .errors import DataError, DeepSeekError
from .features import (
    HashedTextFeaturizer,
    read_caption_file,
    read_feature_file,
    write_feature_file,
)

CAPTION_KEY_SEP = "#"  # per-caption feature ids are "<image_id>#<ordinal>"


def positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def nonneg_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {n}")
    return n


def _feature_map(path) -> dict[str, np.ndarray]:
    return dict(read_feature_file(path))


def _caption_pairs(captions, caption_features, featurizer, image_features=None):
    """Expand (id, captions) into per-caption rows, joining features by id.

    Returns (rows, missing_ids) where each row is
    (image_id, caption, text_feature_or_None, image_feature_or_None).
    """
    rows = []
    missing = []
    for image_id, caps in captions:
        image_feat = None
        if image_features is not None:
            image_feat = image_features.get(image_id)
            if image_feat is None:
                missing.append(image_id)
                continue
        for ordinal, caption in enumerate(caps):
            feat = None
            if caption_features is not None:
                key = f"{image_id}{CAPTION_KEY_SEP}{ordinal}"
                feat = caption_features.get(key)
                if feat is None:
                    missing.append(key)
                    continue
            elif featurizer is not None:
                feat = featurizer.featurize(caption)
            rows.append((image_id, caption, feat, image_feat))
    return rows, missing


def _fail_join(missing) -> int:
    print(
        "error: no feature found for ids: " + ", ".join(sorted(set(missing))),
        file=sys.stderr,
    )
    return 1


def cmd_train_embedding(args) -> int:
    image_features = _feature_map(args.images)
    captions = read_caption_file(args.captions)
    caption_features = _feature_map(args.caption_features) if args.caption_features else None
    if caption_features is None:
        featurizer = HashedTextFeaturizer(dim=args.hash_dim, ngram_max=args.ngram_max)
        text_dim = args.hash_dim
    else:
        featurizer = None
        text_dim = next(iter(caption_features.values())).shape[0] if caption_features else 0

    rows, missing = _caption_pairs(captions, caption_features, featurizer, image_features)
    if missing:
        return _fail_join(missing)
    if not rows:
        raise DataError("no training pairs after joining captions with features")

    image_dim = rows[0][3].shape[0]
    batch = emb.PairBatch(
        image_features=np.vstack([r[3] for r in rows]),
        text_features=np.vstack([r[2] for r in rows]),
    )
    model = emb.init_model(image_dim, text_dim, args.d, args.seed)
    config = emb.TrainConfig(
        epochs=args.epochs,
        d=args.d,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        grad_clip=args.grad_clip,
        seed=args.seed,
        freeze_image_side=args.freeze_image_side,
        margin_mode=args.margin,
        margin=args.margin_value,
    )
    result = emb.train(model, batch, config)
    for epoch, loss in enumerate(result.loss_history):
        print(json.dumps({"epoch": epoch, "loss": loss}))
    print(json.dumps({"diagnostics": result.diagnostics}))
    emb.save_model(result.model, args.out)
    return 0


def cmd_train_captioner(args) -> int:
    features = _feature_map(args.features)
    captions = read_caption_file(args.captions)
    rows, missing = _caption_pairs(captions, None, None, features)
    if missing:
        return _fail_join(missing)
    if not rows:
        raise DataError("no training samples after joining captions with features")

    vocab = cap.Vocabulary.build([r[1] for r in rows], min_freq=args.min_freq)
    image_dim = rows[0][3].shape[0]
    params = cap.init_captioner(
        len(vocab), image_dim, e=args.embed_dim, h=args.hidden, seed=args.seed
    )
    config = cap.CaptionTrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        grad_clip=args.grad_clip,
        seed=args.seed,
    )
    result = cap.train_captioner(params, vocab, [(r[3], r[1]) for r in rows], config)
    for epoch, loss in enumerate(result.loss_history):
        print(json.dumps({"epoch": epoch, "loss": loss}))
    cap.save_captioner(result.params, vocab, args.out)
    return 0


def cmd_caption(args) -> int:
    params, vocab = cap.load_captioner(args.model)
    records = read_feature_file(args.features)
    if args.id is not None:
        records = [r for r in records if r[0] == args.id]
        if not records:
            print(f"error: unknown image id {args.id!r}", file=sys.stderr)
            return 1
    for image_id, feat in records:
        text = cap.greedy_decode(params, vocab, feat, max_len=args.max_len)
        print(f"{image_id}\t{text}")
    return 0


def cmd_index(args) -> int:
    model = emb.load_model(args.model)
    captions = dict(read_caption_file(args.captions)) if args.captions else {}
    caption_features = _feature_map(args.caption_features) if args.caption_features else None

    mode = ret.MODE_CAPTION if args.mode == "caption" else ret.MODE_EMBEDDING
    featurizer = None
    if mode == ret.MODE_CAPTION and caption_features is None:
        featurizer = HashedTextFeaturizer(dim=model.text_dim, ngram_max=args.ngram_max)

    sources = []
    missing = []
    if mode == ret.MODE_EMBEDDING:
        if not args.images:
            raise DataError("--images is required in embedding mode")
        for image_id, feat in read_feature_file(args.images):
            sources.append(ret.SourceRecord(
                image_id=image_id,
                captions=list(captions.get(image_id, [])),
                image_feature=feat,
            ))
    else:
        if not args.captions:
            raise DataError("--captions is required in caption mode")
        for image_id, caps in captions.items():
            feats = None
            if caption_features is not None:
                feats = []
                for ordinal in range(len(caps)):
                    key = f"{image_id}{CAPTION_KEY_SEP}{ordinal}"
                    if key not in caption_features:
                        missing.append(key)
                    else:
                        feats.append(caption_features[key])
            sources.append(ret.SourceRecord(
                image_id=image_id, captions=list(caps), caption_features=feats
            ))
        if missing:
            return _fail_join(missing)

    index = ret.build_index(mode, sources, model, featurizer)
    ret.save_index(index, args.out)
    print(json.dumps({
        "images": len(index),
        "vectors": index.vector_count,
        "mode": index.mode,
        "out": str(args.out),
    }))
    return 0


def cmd_query(args) -> int:
    index = ret.load_index(args.index)
    model = emb.load_model(args.model)
    featurizer = HashedTextFeaturizer(dim=model.text_dim, ngram_max=args.ngram_max)
    started = time.perf_counter()
    result = ret.query_text(index, model, featurizer, args.query, args.k)
    took_ms = (time.perf_counter() - started) * 1000.0
    if args.json:
        payload = {
            "query": args.query,
            "mode": index.mode,
            "results": [],
            "took_ms": took_ms,
        }
        for hit in result.ranked:
            entry = {"image_id": hit.image_id, "distance": hit.distance}
            if hit.best_caption is not None:
                entry["best_caption"] = hit.best_caption
            record = index.record(hit.image_id)
            if record is not None and record.uri is not None:
                entry["uri"] = record.uri
            payload["results"].append(entry)
        print(json.dumps(payload))
    else:
        for rank, hit in enumerate(result.ranked, start=1):
            suffix = f"\t{hit.best_caption}" if hit.best_caption is not None else ""
            print(f"{rank}\t{hit.image_id}\t{hit.distance:.6f}{suffix}")
    return 0


def cmd_eval(args) -> int:
    run = ev.read_run(args.run)
    qrels = ev.read_qrels(args.qrels)
    if args.k is not None:
        run = {q: ids[:args.k] for q, ids in run.items()}
    report = ev.mean_average_precision(run, qrels)
    for query_id in report.unjudged:
        print(f"warning: query {query_id!r} has no judgments, excluded", file=sys.stderr)
    print(json.dumps({
        "map": report.map,
        "per_query": report.per_query,
        "unjudged": report.unjudged,
    }))
    return 0


def cmd_serve(args) -> int:
    host = None
    port = None
    if args.addr:
        host, _, port_s = args.addr.rpartition(":")
        port = int(port_s)
        host = host or None
    config = svc.ServiceConfig.load(
        config_path=args.config,
        index_path=args.index,
        model_path=args.model,
        host=host,
        port=port,
        hash_dim=args.hash_dim,
    )
    svc.serve(config)
    return 0


def cmd_featurize(args) -> int:
    featurizer = HashedTextFeaturizer(dim=args.dim, ngram_max=args.ngram_max)
    if args.text is not None:
        vec = featurizer.featurize(args.text)
        print(json.dumps({"dim": args.dim, "v": list(map(float, vec))}))
        return 0
    captions = read_caption_file(args.captions)
    records = []
    for image_id, caps in captions:
        for ordinal, caption in enumerate(caps):
            key = f"{image_id}{CAPTION_KEY_SEP}{ordinal}"
            records.append((key, featurizer.featurize(caption)))
    write_feature_file(args.out, records, dim=args.dim)
    print(json.dumps({"count": len(records), "dim": args.dim, "out": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepseek",
        description="Text-to-image retrieval: train, index, query, evaluate, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-embedding", help="train the joint embedding projections")
    p.add_argument("--images", required=True, help="DSKF image features")
    p.add_argument("--captions", required=True, help="JSONL captions")
    p.add_argument("--caption-features", help="DSKF caption features keyed '<id>#<ordinal>'")
    p.add_argument("--hash-dim", type=positive_int, default=256,
                   help="hashed featurizer buckets when no caption features are given")
    p.add_argument("--ngram-max", type=positive_int, default=2)
    p.add_argument("--d", type=positive_int, default=128, help="shared space dimension")
    p.add_argument("--epochs", type=nonneg_int, required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=positive_int, default=128)
    p.add_argument("--grad-clip", type=float, default=10.0)
    p.add_argument("--freeze-image-side", action="store_true")
    p.add_argument("--margin", action="store_true", help="hinge objective with in-batch negatives")
    p.add_argument("--margin-value", type=float, default=0.2)
    p.add_argument("--out", required=True, help="output DSKM checkpoint")
    p.set_defaults(func=cmd_train_embedding)

    p = sub.add_parser("train-captioner", help="train the LSTM caption model")
    p.add_argument("--features", required=True, help="DSKF image features")
    p.add_argument("--captions", required=True, help="JSONL captions")
    p.add_argument("--embed-dim", type=positive_int, default=64)
    p.add_argument("--hidden", type=positive_int, default=128)
    p.add_argument("--min-freq", type=positive_int, default=1)
    p.add_argument("--epochs", type=nonneg_int, required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=positive_int, default=128)
    p.add_argument("--grad-clip", type=float, default=10.0)
    p.add_argument("--out", required=True, help="output DSKC checkpoint")
    p.set_defaults(func=cmd_train_captioner)

    p = sub.add_parser("caption", help="greedy-decode captions for stored features")
    p.add_argument("--model", required=True, help="DSKC checkpoint")
    p.add_argument("--features", required=True, help="DSKF image features")
    p.add_argument("--id", help="decode a single image id")
    p.add_argument("--max-len", type=positive_int, default=20)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("index", help="build a DSKI search index")
    p.add_argument("--mode", choices=("caption", "embedding"), required=True)
    p.add_argument("--model", required=True, help="DSKM checkpoint")
    p.add_argument("--images", help="DSKF image features (embedding mode)")
    p.add_argument("--captions", help="JSONL captions")
    p.add_argument("--caption-features", help="DSKF caption features keyed '<id>#<ordinal>'")
    p.add_argument("--ngram-max", type=positive_int, default=2)
    p.add_argument("--out", required=True, help="output DSKI index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="run one text query against an index")
    p.add_argument("--index", required=True, help="DSKI index")
    p.add_argument("--model", required=True, help="DSKM checkpoint")
    p.add_argument("-q", "--query", required=True)
    p.add_argument("-k", type=positive_int, default=10)
    p.add_argument("--ngram-max", type=positive_int, default=2)
    p.add_argument("--json", action="store_true", help="emit the service SearchResponse shape")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score a run file against qrels (mAP)")
    p.add_argument("--run", required=True, help="TSV run file")
    p.add_argument("--qrels", required=True, help="TSV relevance judgments")
    p.add_argument("--k", type=positive_int, help="truncate rankings to top k")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP query service")
    p.add_argument("--index", help="DSKI index (or DEEPSEEK_INDEX)")
    p.add_argument("--model", help="DSKM checkpoint (or DEEPSEEK_MODEL)")
    p.add_argument("--addr", help="host:port (or DEEPSEEK_ADDR)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--hash-dim", type=positive_int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("featurize", help="hash text or captions into feature vectors")
    p.add_argument("--dim", type=positive_int, required=True)
    p.add_argument("--ngram-max", type=positive_int, default=2)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text", help="featurize one string, print JSON")
    group.add_argument("--captions", help="JSONL captions to featurize into a DSKF file")
    p.add_argument("--out", help="output DSKF (with --captions)")
    p.set_defaults(func=cmd_featurize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "featurize" and args.captions and not args.out:
        parser.error("--out is required with --captions")
    try:
        return args.func(args)
    except DeepSeekError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
