"""Evaluation suites: perplexity and the yes/no first-token protocol.

Yes/no accuracy is the fraction of records whose first greedily generated
token equals the first token of the reference answer, under the exact prompt
template used in training. Conditions can optionally be cache-enhanced
before the bind network, which is the paired comparison the cross-modal
suite exists for.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .bind import BindNetwork
from .cache import DEFAULT_ALPHA, DEFAULT_TOP_K, CacheStore, enhance
from .data import CaptionRecord, InstructionRecord
from .encoders import encode, placeholder_embedding
from .lm import GenerationParams, InjectedLM, caption_loss, generate
from .tensor import EmptyBatchError
from .tokenizer import Tokenizer
from .train import prepare_caption, prepare_instruction, render_instruction_prompt


def perplexity_eval(lm: InjectedLM, bind: BindNetwork, tok: Tokenizer,
                    encoders, records: list) -> dict:
    """exp(mean NLL) pooled over every target position in the corpus."""
    if not records:
        raise EmptyBatchError("no records to evaluate")
    total_nll = 0.0
    total_tokens = 0
    for rec in records:
        if isinstance(rec, CaptionRecord):
            ex = prepare_caption(rec, tok, encoders)
        else:
            ex = prepare_instruction(rec, tok, encoders)
        loss = caption_loss(lm, bind, ex.embedding, ex.prompt_ids, ex.target_ids)
        total_nll += loss.item() * len(ex.target_ids)
        total_tokens += len(ex.target_ids)
    mean_nll = total_nll / total_tokens
    return {
        "suite": "perplexity",
        "n": len(records),
        "token_count": total_tokens,
        "mean_nll": mean_nll,
        "perplexity": math.exp(mean_nll),
    }


def yesno_eval(lm: InjectedLM, bind: BindNetwork, tok: Tokenizer, encoders,
               records: list[InstructionRecord], cache: CacheStore | None = None,
               k: int = DEFAULT_TOP_K, alpha: float = DEFAULT_ALPHA,
               raw_eq4: bool = False) -> dict:
    if not records:
        raise EmptyBatchError("no records to evaluate")
    items = []
    correct = 0
    for rec in records:
        if rec.is_language_only:
            condition_src = placeholder_embedding(bind.config.dim_joint)
        else:
            emb = encode(encoders[rec.modality], rec.raw, rec.source_id or "")
            if cache is not None:
                condition_src = enhance(cache, emb, k=k, alpha=alpha, raw_eq4=raw_eq4).enhanced
            else:
                condition_src = emb
        prompt_ids = tok.encode(render_instruction_prompt(rec))
        out = generate(lm, bind, condition_src, prompt_ids, GenerationParams(max_new_tokens=2))
        expected = tok.encode(" " + rec.response)[0]
        ok = bool(out) and out[0] == expected
        correct += ok
        items.append(
            {
                "source_id": rec.source_id,
                "expected": rec.response,
                "first_token": out[0] if out else None,
                "answer": tok.decode(out[:1]).strip() if out else "",
                "ok": ok,
            }
        )
    report = {
        "suite": "yesno",
        "n": len(records),
        "correct": correct,
        "accuracy": correct / len(records),
        "cache": None if cache is None else {"k": k, "alpha": alpha, "raw_eq4": raw_eq4},
        "items": items,
    }
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
