"""Command-line entry point: gen, train, ablate, eval, index, search, bench.

Exit codes: 0 success, 2 input error, 3 data or format error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import numkit as nk
from .engine import (
    IndexMismatchError,
    VideoIndex,
    bench,
    build_dense_baseline,
    build_index,
    linear_fit_r2,
    load_checkpoint,
    save_checkpoint,
)
from .evalkit import (
    DataError,
    QueryAnalysis,
    group_by_mv,
    group_by_overlap,
    localization_quality,
    overlap_degree,
    recall_report,
    span_intervals,
    v2t_report,
    write_csv,
    write_records,
)
from .model import InputError, ModelConfig, embed_queries, embed_videos, fingerprint, score_numpy
from .objectives import LossWeights
from .synthdata import (
    FeatureFileError,
    ManifestError,
    SpecError,
    SyntheticCorpusSpec,
    generate_corpus,
    load_corpus,
    load_feature_file,
)
from .trainer import TrainConfig, TrainingError, ablate, evaluate_ranks, train

EXIT_OK, EXIT_INPUT, EXIT_DATA = 0, 2, 3


class CliInputError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    low = text.strip().lower()
    if low in ("none", "null"):
        return None
    if low in ("true", "false"):
        return low == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip().strip('"').strip("'")


def read_config(path) -> dict:
    """``key = value`` lines (``#`` comments) into a dict of parsed values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[amdnet]\n" + Path(path).read_text(encoding="utf-8"))
    except (OSError, configparser.Error) as exc:
        raise CliInputError(f"cannot read config {path}: {exc}") from exc
    return {k: _parse_value(v) for k, v in parser["amdnet"].items()}


_TARGETS = (SyntheticCorpusSpec, ModelConfig, TrainConfig, LossWeights)


def _pick(cls, conf: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in conf.items() if k in names and not isinstance(v, dict)}


def resolve(args) -> dict:
    conf = read_config(args.config) if args.config else {}
    known = set().union(*({f.name for f in fields(c)} for c in _TARGETS)) | {"overlap_edges"}
    unknown = sorted(set(conf) - known)
    if unknown:
        raise CliInputError(f"unknown config keys: {', '.join(unknown)}")
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.precision is not None:
        conf["precision"] = args.precision
    conf.setdefault("precision", "f64")
    return conf


def model_config(conf: dict, D_in: int | None = None) -> ModelConfig:
    kw = _pick(ModelConfig, conf)
    if D_in is not None:
        kw["D_in"] = D_in
    return ModelConfig(**kw)


def train_config(conf: dict, mcfg: ModelConfig) -> TrainConfig:
    kw = _pick(TrainConfig, conf)
    kw.pop("model", None)
    kw.pop("weights", None)
    return TrainConfig(**kw, model=mcfg, weights=LossWeights(**_pick(LossWeights, conf)))


def _load(args_corpus, conf):
    N = conf.get("N", ModelConfig.N)
    corpus = load_corpus(args_corpus, N)
    return corpus, model_config(conf, corpus.clips.shape[-1])


def _dtype(conf) -> np.dtype:
    return nk.dtype_for(conf["precision"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args, conf) -> None:
    spec = SyntheticCorpusSpec(**_pick(SyntheticCorpusSpec, conf))
    gen = generate_corpus(spec, Path(args.out))
    print(f"wrote {len(gen.manifest.videos)} videos and {len(gen.manifest.queries)} queries to {args.out}")


def _train_records(report) -> tuple[list[dict], list[dict]]:
    recs = [{"type": "epoch", "label": report.label, **e.as_dict()} for e in report.epochs]
    times = [{"label": report.label, "epoch": e.epoch, "seconds": e.seconds} for e in report.epochs]
    return recs, times


def cmd_train(args, conf) -> None:
    corpus, mcfg = _load(args.corpus, conf)
    cfg = train_config(conf, mcfg)
    params, report = train(corpus, cfg)
    out = Path(args.out)
    save_checkpoint(out, params, mcfg, {"train": report.summary()})
    recs, times = _train_records(report)
    write_records(out / "train_report.jsonl", recs + [{"type": "summary", **report.summary()}])
    write_csv(out / "train_report.csv", recs, ["label", "epoch", "loss", "ret", "div", "rel", "sumr"])
    write_records(out / "timings.jsonl", times)
    print(json.dumps(report.summary(), sort_keys=True))


def cmd_ablate(args, conf) -> None:
    corpus, mcfg = _load(args.corpus, conf)
    cfg = train_config(conf, mcfg)
    test = load_corpus(args.test_corpus, mcfg.N) if args.test_corpus else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, epochs, times = [], [], []
    for label, (params, report) in ablate(corpus, cfg).items():
        row = {"label": label, **report.summary()}
        if test is not None:
            row.update({f"test_{k}": v for k, v in recall_report(evaluate_ranks(params, mcfg, test)).items()})
        rows.append(row)
        r, t = _train_records(report)
        epochs += r
        times += t
    write_records(out / "ablation.jsonl", rows)
    write_csv(out / "ablation.csv", rows)
    write_records(out / "ablation_epochs.jsonl", epochs)
    write_records(out / "timings.jsonl", times)
    for row in rows:
        print(json.dumps(row, sort_keys=True))


def evaluate_corpus(corpus, params, mcfg: ModelConfig, overlap_edges=(0.0, 0.1, 0.3, 1.0)) -> dict:
    """Every evaluation report for one corpus, as plain dicts."""
    Vg, spans = embed_videos(corpus.clips, params, mcfg, with_spans=True)
    Q = embed_queries(corpus.query_feats, params, mcfg)
    scores = score_numpy(Q, Vg, mcfg.sim_mode)
    ranks = evaluate_ranks(params, mcfg, corpus, video_embeddings=Vg)
    out = {
        "t2v": recall_report(ranks),
        "v2t": v2t_report(scores.T, corpus.query_video, query_ids=corpus.query_ids),
    }
    if all(q in corpus.query_moment for q in corpus.query_ids):
        moments = [corpus.query_moment[q] for q in corpus.query_ids]
        out["mv"] = group_by_mv([QueryAnalysis(q, m.length) for q, m in zip(corpus.query_ids, moments)], ranks)
        degree = {}
        for vid in corpus.video_ids:
            ms = corpus.moments[vid]
            for m, u in zip(ms, overlap_degree([m.span for m in ms])):
                degree[m.moment_id] = u
        out["overlap"] = group_by_overlap([degree[m.moment_id] for m in moments], ranks, overlap_edges)
        if spans is not None:
            iv = span_intervals(spans[0], spans[1], mcfg.sigma)
            out["localization"] = localization_quality(iv, [[m.span for m in corpus.moments[v]] for v in corpus.video_ids])
    return out


def cmd_eval(args, conf) -> None:
    params, mcfg, _ = load_checkpoint(args.checkpoint, _dtype(conf))
    corpus = load_corpus(args.corpus, mcfg.N)
    edges = tuple(conf.get("overlap_edges", (0.0, 0.1, 0.3, 1.0)))
    res = evaluate_corpus(corpus, params, mcfg, edges)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recs = [{"report": "t2v", **res["t2v"]}, {"report": "v2t", **res["v2t"]}]
    for name in ("mv", "overlap"):
        if name in res:
            rows = [{"report": name, "bin": b, **v} for b, v in res[name].items()]
            recs += rows
            write_csv(out / f"eval_{name}.csv", rows, ["bin", "count", "R@1", "R@5", "R@10", "R@100", "SumR"])
    if "localization" in res:
        recs.append({"report": "localization", **res["localization"]})
    write_records(out / "eval.jsonl", recs)
    write_csv(
        out / "eval_summary.csv",
        [{"direction": d, **res[d]} for d in ("t2v", "v2t")],
        ["direction", "R@1", "R@5", "R@10", "R@100", "SumR"],
    )
    print(json.dumps({"t2v": res["t2v"], "v2t": res["v2t"]}, sort_keys=True))


def cmd_index(args, conf) -> None:
    params, mcfg, _ = load_checkpoint(args.checkpoint, _dtype(conf))
    corpus = load_corpus(args.corpus, mcfg.N)
    build = build_dense_baseline if args.baseline else build_index
    index = build(corpus, params, mcfg)
    index.save(args.out)
    print(f"{index.kind} index: {len(index)} videos, {index.rows_per_video} rows each, {index.nbytes} bytes")


def cmd_search(args, conf) -> None:
    if args.top_k < 1:
        raise CliInputError("--top-k must be >= 1")
    params, mcfg, _ = load_checkpoint(args.checkpoint, _dtype(conf))
    index = VideoIndex.load(args.index, fingerprint(params, mcfg))
    feats = load_feature_file(args.query_file)
    if feats.shape[1] != mcfg.D_in:
        raise CliInputError(f"query features have {feats.shape[1]} columns, model expects {mcfg.D_in}")
    Q = embed_queries(feats, params, mcfg)
    recs = []
    for i, q in enumerate(Q):
        idx, scores = index.rank(q[None], args.top_k)
        recs.append({"query": i, "results": [{"video_id": index.video_ids[j], "score": float(s)} for j, s in zip(idx, scores)]})
    if args.out:
        write_records(args.out, recs)
        write_csv(
            Path(args.out).with_suffix(".csv"),
            [{"query": r["query"], "rank": k + 1, **hit} for r in recs for k, hit in enumerate(r["results"])],
        )
    else:
        for r in recs:
            print(json.dumps(r, sort_keys=True))


def cmd_bench(args, conf) -> None:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise CliInputError(f"bad --sizes {args.sizes!r}") from exc
    d = conf.get("d", 64)
    N = conf.get("N", ModelConfig.N)
    kinds = ["moment", "dense"] if args.baseline else ["moment"]
    database = {}
    if args.index:
        idx = VideoIndex.load(args.index)
        database[idx.kind] = idx
        kinds = [idx.kind]
    reports = [bench(k, sizes, args.repetitions, database.get(k), N=N, d=d, seed=conf.get("seed", 0)) for k in kinds]
    recs = [r for rep in reports for r in rep.records()]
    for rep in reports:
        recs.append(
            {
                "kind": rep.kind,
                "summary": True,
                "latency_r2": linear_fit_r2(rep.sizes, [p.median_ms for p in rep.points]),
                "memory_r2": linear_fit_r2(rep.sizes, [p.index_bytes for p in rep.points]),
                "machine": rep.machine,
            }
        )
    if len(reports) == 2:
        m, dn = reports
        recs.append(
            {
                "summary": True,
                "memory_ratio": dn.points[-1].index_bytes / m.points[-1].index_bytes,
                "latency_ratio": dn.points[-1].median_ms / m.points[-1].median_ms,
                "size": sizes[-1],
            }
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "bench.jsonl", recs)
    write_csv(out / "bench.csv", [r for rep in reports for r in rep.records()])
    for r in recs:
        print(json.dumps(r, sort_keys=True))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amdnet", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="train a model and save a checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", help="train the component ablation rows")
    s.add_argument("--corpus", required=True)
    s.add_argument("--test-corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("eval", help="retrieval, grouping and localization reports")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("index", help="build and persist a retrieval index")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--baseline", action="store_true", help="dense multi-scale window index instead")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("search", help="rank indexed videos for raw query features")
    s.add_argument("--index", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query-file", required=True)
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("bench", help="single-thread ranking latency and memory")
    s.add_argument("--sizes", default="500,1000,1500,2000,2500")
    s.add_argument("--baseline", action="store_true", help="also bench the dense window index")
    s.add_argument("--repetitions", type=int, default=100)
    s.add_argument("--index", help="bench an existing index instead of random embeddings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        conf = resolve(args)
        nk.set_default_dtype(conf["precision"])
        args.func(args, conf)
    except (CliInputError, InputError, SpecError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FeatureFileError, ManifestError, DataError, IndexMismatchError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
