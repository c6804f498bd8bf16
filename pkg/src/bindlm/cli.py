"""Command-line surface tying the corpus, training, cache, and eval together.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cache import (
    DEFAULT_ALPHA,
    DEFAULT_TOP_K,
    CacheBuildError,
    CacheFormatError,
    CacheRangeError,
    EmptyCacheError,
    cache_build,
    enhance,
    load_cache,
    save_cache,
    topk,
)
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .data import (
    DatasetManifest,
    IngestError,
    generate_cache_corpus,
    generate_caption_corpus,
    generate_hq_corpus,
    generate_instruction_corpus,
    ingest,
    write_caption_corpus,
    write_instruction_corpus,
    write_jsonl,
)
from .encoders import (
    DegenerateMixError,
    EncoderConfig,
    Modality,
    build_encoders,
    encode,
    mix,
    read_raw_samples,
)
from .evaluate import perplexity_eval, write_report, yesno_eval
from .lm import GenerationParams, TruncationError, VocabularyError, generate, prompt_template
from .tensor import EmptyBatchError, NonFiniteError, ShapeError
from .train import DivergenceError, PipelineError, default_plan, plan_from_file, run_stage

_USAGE_EXIT, _DATA_EXIT, _DIVERGENCE_EXIT = 1, 2, 3

_DATA_ERRORS = (
    IngestError,
    CacheFormatError,
    CacheRangeError,
    CacheBuildError,
    EmptyCacheError,
    CheckpointFormatError,
    ShapeError,
    VocabularyError,
    TruncationError,
    DegenerateMixError,
    EmptyBatchError,
    NonFiniteError,
    PipelineError,
    FileNotFoundError,
    json.JSONDecodeError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_help()}")


def _build_parser() -> _Parser:
    p = _Parser(prog="bindlm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="emit the synthetic corpora")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--caption-pairs", type=int, default=32)
    g.add_argument("--caption-variants", type=int, default=16)
    g.add_argument("--instruct-pairs", type=int, default=64)
    g.add_argument("--instruct-variants", type=int, default=12)
    g.add_argument("--language-records", type=int, default=16)
    g.add_argument("--hq-records", type=int, default=8)
    g.add_argument("--cache-variants", type=int, default=16)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=["pretrain", "instruct", "hq"])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="input checkpoint (required after pretrain)")
    t.add_argument("--plan", help="flat key = value plan file")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--history", help="write per-step loss/gate log as JSON")

    gen = sub.add_parser("generate", help="conditioned generation from a checkpoint")
    gen.add_argument("--ckpt", required=True)
    gen.add_argument("--modality", required=True)
    gen.add_argument("--input", required=True, help="JSON file with the raw vector")
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--cache")
    gen.add_argument("--k", type=int, default=DEFAULT_TOP_K)
    gen.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    gen.add_argument("--raw-eq4", action="store_true")
    gen.add_argument("--max-new", type=int, default=24)
    gen.add_argument("--temperature", type=float, default=0.0)
    gen.add_argument("--top-k", type=int, default=0)
    gen.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("cache", help="build or query the embedding cache")
    csub = c.add_subparsers(dest="cache_command", required=True)
    cb = csub.add_parser("build")
    cb.add_argument("--data", required=True)
    cb.add_argument("--corpus", default="cache.jsonl")
    cb.add_argument("--out", required=True)
    cq = csub.add_parser("query")
    ce = csub.add_parser("enhance")
    for q in (cq, ce):
        q.add_argument("--cache", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--modality", required=True)
        q.add_argument("--input", required=True)
        q.add_argument("--k", type=int, default=DEFAULT_TOP_K)
        q.add_argument("--mode", choices=["exact", "partitioned"], default="exact")
        q.add_argument("--nlist", type=int)
        q.add_argument("--nprobe", type=int)
        q.add_argument("--seed", type=int, default=0)
    ce.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    ce.add_argument("--raw-eq4", action="store_true")

    m = sub.add_parser("mix", help="coefficient-weighted embedding mixing")
    m.add_argument("--data", required=True)
    m.add_argument("--inputs", nargs="+", required=True, metavar="FILE:COEF")
    m.add_argument("--out")

    e = sub.add_parser("eval", help="run an evaluation suite")
    e.add_argument("--suite", required=True, choices=["perplexity", "yesno"])
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--file", help="corpus file name inside --data")
    e.add_argument("--cache")
    e.add_argument("--k", type=int, default=DEFAULT_TOP_K)
    e.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    e.add_argument("--raw-eq4", action="store_true")
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--seed", type=int, default=0)
    return p


def _read_raw_input(path) -> np.ndarray:
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, dict):
        obj = obj["raw"]
    return np.asarray(obj, dtype=np.float64)


def _modality(name: str) -> Modality:
    try:
        return Modality(name)
    except ValueError:
        raise UsageError(f"unknown modality {name!r}")


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    enc_cfg = EncoderConfig(seed=args.seed)
    encoders = build_encoders(enc_cfg)
    captions, _ = generate_caption_corpus(
        args.caption_pairs, args.seed, encoders, variants=args.caption_variants
    )
    write_caption_corpus(out / "captions.jsonl", captions)
    instruct, objects = generate_instruction_corpus(
        args.instruct_pairs, args.language_records, args.seed, encoders,
        variants=args.instruct_variants,
    )
    write_instruction_corpus(out / "instruct.jsonl", instruct)
    write_instruction_corpus(out / "hq.jsonl", generate_hq_corpus(args.hq_records, args.seed, encoders))
    eval_img, _ = generate_instruction_corpus(args.instruct_pairs, 0, args.seed, encoders)
    write_instruction_corpus(out / "eval_yesno.jsonl", eval_img)
    eval_audio, _ = generate_instruction_corpus(
        args.instruct_pairs, 0, args.seed, encoders, modality=Modality.AUDIO
    )
    write_instruction_corpus(out / "eval_yesno_audio.jsonl", eval_audio)
    write_jsonl(out / "cache.jsonl",
                generate_cache_corpus(objects, args.cache_variants, args.seed, encoders))
    manifest = DatasetManifest(
        encoder=enc_cfg,
        seed=args.seed,
        files={
            "pretrain": "captions.jsonl",
            "instruct": "instruct.jsonl",
            "hq_instruct": "hq.jsonl",
            "eval_yesno": "eval_yesno.jsonl",
            "eval_yesno_audio": "eval_yesno_audio.jsonl",
            "cache": "cache.jsonl",
        },
    )
    manifest.save(out)
    print(f"wrote corpora to {out}")
    return 0


def _cmd_train(args) -> int:
    stage = {"hq": "hq_instruct"}.get(args.stage, args.stage)
    if args.plan:
        plan = plan_from_file(args.plan, stage, args.data, args.seed)
    else:
        plan = default_plan(stage, args.data, seed=args.seed)
    checkpoint_in = load_checkpoint(args.init) if args.init else None
    history: list = []
    ckpt = run_stage(plan, checkpoint_in=checkpoint_in, history=history)
    save_checkpoint(ckpt, args.out)
    if args.history:
        Path(args.history).write_text(json.dumps(history, sort_keys=True) + "\n")
    final = history[-1]["loss"] if history else float("nan")
    print(f"stage {plan.stage}: {len(history)} steps, final loss {final:.4f}, "
          f"checkpoint {args.out}")
    return 0


def _condition_for(args, encoders, bind):
    emb = encode(encoders[_modality(args.modality)], _read_raw_input(args.input))
    if args.cache:
        store = load_cache(args.cache)
        emb = enhance(store, emb, k=args.k, alpha=args.alpha, raw_eq4=args.raw_eq4).enhanced
    return emb


def _cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    lm, bind, tok = ckpt.to_models()
    encoders = build_encoders(ckpt.encoder_config())
    emb = _condition_for(args, encoders, bind)
    prompt_ids = tok.encode(prompt_template(args.prompt))
    out = generate(
        lm, bind, emb, prompt_ids,
        GenerationParams(max_new_tokens=args.max_new, temperature=args.temperature,
                         top_k=args.top_k, seed=args.seed),
    )
    print(tok.decode(out).strip())
    return 0


def _cmd_cache(args) -> int:
    if args.cache_command == "build":
        manifest = DatasetManifest.load(args.data)
        encoders = manifest.encoders()
        samples = read_raw_samples(Path(args.data) / args.corpus)
        store = cache_build(
            encode(encoders[s["modality"]], s["raw"], s["source_id"]) for s in samples
        )
        save_cache(store, args.out)
        print(f"cached {store.size} embeddings to {args.out}")
        return 0

    store = load_cache(args.cache)
    manifest = DatasetManifest.load(args.data)
    encoders = manifest.encoders()
    emb = encode(encoders[_modality(args.modality)], _read_raw_input(args.input))
    if args.mode == "partitioned":
        store.build_partitions(nlist=args.nlist, nprobe=args.nprobe, seed=args.seed)
    if args.cache_command == "query":
        r = topk(store, emb, args.k, mode=args.mode)
        print(json.dumps(
            {
                "ids": [store.ids[i] for i in r.indices],
                "indices": r.indices,
                "similarities": r.similarities.array.reshape(-1).tolist(),
            },
            sort_keys=True,
        ))
        return 0
    r = enhance(store, emb, k=args.k, alpha=args.alpha, mode=args.mode, raw_eq4=args.raw_eq4)
    print(json.dumps(
        {"enhanced": r.enhanced.array.reshape(-1).tolist(), "indices": r.indices},
        sort_keys=True,
    ))
    return 0


def _cmd_mix(args) -> int:
    manifest = DatasetManifest.load(args.data)
    encoders = manifest.encoders()
    embs, coeffs = [], []
    for spec in args.inputs:
        if ":" not in spec:
            raise UsageError(f"--inputs entries are FILE:COEF, got {spec!r}")
        file_part, coef = spec.rsplit(":", 1)
        obj = json.loads(Path(file_part).read_text())
        modality = _modality(obj["modality"])
        embs.append(encode(encoders[modality], np.asarray(obj["raw"], dtype=np.float64)))
        coeffs.append(float(coef))
    mixed = mix(embs, coeffs)
    payload = json.dumps(
        {"modality": mixed.modality.value, "vector": mixed.vector.array.reshape(-1).tolist()},
        sort_keys=True,
    )
    if args.out:
        Path(args.out).write_text(payload + "\n")
    else:
        print(payload)
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    lm, bind, tok = ckpt.to_models()
    encoders = build_encoders(ckpt.encoder_config())
    manifest = DatasetManifest.load(args.data)
    if args.suite == "perplexity":
        name = args.file or manifest.files.get("pretrain", "captions.jsonl")
        records = ingest(Path(args.data) / name, "caption")
        report = perplexity_eval(lm, bind, tok, encoders, records)
    else:
        name = args.file or manifest.files.get("eval_yesno", "eval_yesno.jsonl")
        records = ingest(Path(args.data) / name, "instruction")
        store = load_cache(args.cache) if args.cache else None
        report = yesno_eval(lm, bind, tok, encoders, records, cache=store,
                            k=args.k, alpha=args.alpha, raw_eq4=args.raw_eq4)
    if args.out:
        write_report(report, args.out)
    summary = {k: v for k, v in report.items() if k != "items"}
    print(json.dumps(summary, sort_keys=True))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "cache": _cmd_cache,
    "mix": _cmd_mix,
    "eval": _cmd_eval,
}


def cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DIVERGENCE_EXIT
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_EXIT


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
