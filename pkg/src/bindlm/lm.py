"""Toy decoder-only transformer with attention-free gated condition injection.

The condition vector is added to every position's hidden state at the input
of every layer, scaled by a learnable per-layer gate that starts at exactly
zero. With all gates at zero the conditioned forward pass is bitwise
identical to the unconditioned one, so training starts from the plain LM and
the gates open the conditioning pathway only as gradients demand it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import peft
from .bind import BindNetwork, bind_forward
from .encoders import JointEmbedding
from .tensor import (
    EmptyBatchError,
    ShapeError,
    Tensor,
    add,
    causal_attention,
    derive_rng,
    embedding,
    matmul,
    mul,
    rmsnorm,
    rope,
    silu,
    softmax_cross_entropy,
    uniform_init,
)
from .tokenizer import BOS, EOS

RMS_EPS = 1e-6

PROMPT_TEMPLATE = "Instruction: {instruction}\nResponse:"
YESNO_SUFFIX = " Please answer yes or no."


def prompt_template(instruction: str) -> str:
    return PROMPT_TEMPLATE.format(instruction=instruction)


def yesno_prompt(question: str) -> str:
    return prompt_template(question + YESNO_SUFFIX)


class VocabularyError(ValueError):
    """A token id fell outside the model vocabulary."""


class TruncationError(ValueError):
    """A sequence would exceed the model's maximum length."""


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 512
    dim: int = 128
    layers: int = 4
    heads: int = 4
    max_seq: int = 128
    positions: str = "learned"  # or "rope"
    shared_gate: bool = False
    ffn_hidden: int = 256

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.positions not in ("learned", "rope"):
            raise ShapeError(f"positions must be learned|rope, got {self.positions!r}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "layers": self.layers,
            "heads": self.heads,
            "max_seq": self.max_seq,
            "positions": self.positions,
            "shared_gate": self.shared_gate,
            "ffn_hidden": self.ffn_hidden,
        }

    @staticmethod
    def from_dict(d: dict) -> "LMConfig":
        return LMConfig(**d)


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 24
    temperature: float = 0.0  # 0 means greedy argmax
    top_k: int = 0  # 0 means no cutoff
    seed: int = 0


LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


class InjectedLM:
    """Parameter store plus adapter metadata; forward logic is lm_forward."""

    def __init__(self, config: LMConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapters: dict[str, peft.LoraSpec] = {}
        if config.positions == "rope":
            hd = config.dim // config.heads
            pos = np.arange(config.max_seq)[:, None]
            freqs = 1.0 / (10000.0 ** (np.arange(hd // 2)[None, :] * 2.0 / hd))
            self._rope_cos = np.cos(pos * freqs)
            self._rope_sin = np.sin(pos * freqs)

    def gate_name(self, layer: int) -> str:
        return "gates.shared" if self.config.shared_gate else f"gates.{layer}"

    def gate_values(self) -> list[float]:
        if self.config.shared_gate:
            return [self.params["gates.shared"].item()]
        return [self.params[f"gates.{l}"].item() for l in range(self.config.layers)]

    def param_names(self) -> list[str]:
        return sorted(self.params)


def lm_init(config: LMConfig, seed: int) -> InjectedLM:
    params: dict[str, Tensor] = {}
    c = config.dim
    rng = derive_rng(seed, "lm", "embeddings")
    params["tok_emb"] = uniform_init(rng, (config.vocab_size, c), 1.0 / np.sqrt(c))
    if config.positions == "learned":
        params["pos_emb"] = uniform_init(rng, (config.max_seq, c), 0.01)
    for l in range(config.layers):
        rng = derive_rng(seed, "lm", f"layer{l}")
        bound = 1.0 / np.sqrt(c)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"layers.{l}.{name}"] = uniform_init(rng, (c, c), bound)
        params[f"layers.{l}.attn_norm"] = Tensor(np.ones((1, c)))
        params[f"layers.{l}.ffn_norm"] = Tensor(np.ones((1, c)))
        params[f"layers.{l}.w_gate"] = uniform_init(rng, (c, config.ffn_hidden), bound)
        params[f"layers.{l}.w_up"] = uniform_init(rng, (c, config.ffn_hidden), bound)
        params[f"layers.{l}.w_down"] = uniform_init(
            rng, (config.ffn_hidden, c), 1.0 / np.sqrt(config.ffn_hidden)
        )
    params["final_norm"] = Tensor(np.ones((1, c)))
    # near-uniform head: small enough that untrained loss is ~log(V), nonzero
    # so every vocabulary column has a usable direction for later stages
    rng = derive_rng(seed, "lm", "head")
    params["head"] = uniform_init(rng, (c, config.vocab_size), 0.02)
    if config.shared_gate:
        params["gates.shared"] = Tensor(np.zeros((1, 1)))
    else:
        for l in range(config.layers):
            params[f"gates.{l}"] = Tensor(np.zeros((1, 1)))
    return InjectedLM(config, params)


def _linear(lm: InjectedLM, name: str, x: Tensor) -> Tensor:
    spec = lm.adapters.get(name)
    if spec is None:
        return matmul(x, lm.params[name])
    return peft.lora_forward(lm.params[name], peft.adapter_view(lm, name), x)


def lm_forward(lm: InjectedLM, tokens, condition: Tensor | None = None) -> Tensor:
    """Logits [N, V] for a token sequence, optionally condition-injected."""
    ids = list(tokens)
    if not ids:
        raise ShapeError("empty token sequence")
    if len(ids) > lm.config.max_seq:
        raise TruncationError(f"sequence length {len(ids)} > max_seq {lm.config.max_seq}")
    if max(ids) >= lm.config.vocab_size or min(ids) < 0:
        raise VocabularyError(
            f"token id outside [0, {lm.config.vocab_size}): {min(ids)}..{max(ids)}"
        )
    if condition is not None and condition.shape != (1, lm.config.dim):
        raise ShapeError(f"condition must be [1, {lm.config.dim}], got {condition.shape}")
    n = len(ids)
    x = embedding(lm.params["tok_emb"], ids)
    if lm.config.positions == "learned":
        x = add(x, embedding(lm.params["pos_emb"], range(n)))
    for l in range(lm.config.layers):
        if condition is not None:
            x = add(x, mul(lm.params[lm.gate_name(l)], condition))
        h = rmsnorm(x, lm.params[f"layers.{l}.attn_norm"], RMS_EPS)
        q = _linear(lm, f"layers.{l}.wq", h)
        k = _linear(lm, f"layers.{l}.wk", h)
        v = _linear(lm, f"layers.{l}.wv", h)
        if lm.config.positions == "rope":
            q = rope(q, lm._rope_cos[:n], lm._rope_sin[:n], lm.config.heads)
            k = rope(k, lm._rope_cos[:n], lm._rope_sin[:n], lm.config.heads)
        x = add(x, _linear(lm, f"layers.{l}.wo", causal_attention(q, k, v, lm.config.heads)))
        h2 = rmsnorm(x, lm.params[f"layers.{l}.ffn_norm"], RMS_EPS)
        gated = mul(silu(_linear(lm, f"layers.{l}.w_gate", h2)), _linear(lm, f"layers.{l}.w_up", h2))
        x = add(x, _linear(lm, f"layers.{l}.w_down", gated))
    x = rmsnorm(x, lm.params["final_norm"], RMS_EPS)
    return matmul(x, lm.params["head"])


def _condition_from(bind: BindNetwork | None, embedding_in) -> Tensor | None:
    if embedding_in is None:
        return None
    if bind is None:
        raise ShapeError("an embedding was given without a bind network")
    return bind_forward(bind, embedding_in)


def caption_loss(
    lm: InjectedLM,
    bind: BindNetwork | None,
    embedding_in: "JointEmbedding | Tensor | None",
    prompt_tokens,
    target_tokens,
) -> Tensor:
    """Mean NLL of the target continuation, prompt positions masked out."""
    prompt = list(prompt_tokens)
    target = list(target_tokens)
    if not target:
        raise EmptyBatchError("empty target")
    seq = [BOS] + prompt + target
    condition = _condition_from(bind, embedding_in)
    logits = lm_forward(lm, seq[:-1], condition)
    labels = [-1] * len(prompt) + target
    return softmax_cross_entropy(logits, labels, ignore_index=-1)


def generate(
    lm: InjectedLM,
    bind: BindNetwork | None,
    embedding_in: "JointEmbedding | Tensor | None",
    prompt_tokens,
    params: GenerationParams,
) -> list[int]:
    """Autoregressive continuation of the prompt; returns new tokens only.

    Greedy when temperature is 0; otherwise samples from the (optionally
    top-k truncated) softmax, deterministically in the params seed. Stops
    after emitting EOS.
    """
    prompt = list(prompt_tokens)
    if not prompt:
        raise ShapeError("prompt must be nonempty")
    if len(prompt) + 1 + params.max_new_tokens > lm.config.max_seq:
        raise TruncationError(
            f"prompt {len(prompt)} + new {params.max_new_tokens} exceeds "
            f"max_seq {lm.config.max_seq}"
        )
    condition = _condition_from(bind, embedding_in)
    rng = derive_rng(params.seed, "generate")
    seq = [BOS] + prompt
    out: list[int] = []
    for _ in range(params.max_new_tokens):
        logits = lm_forward(lm, seq, condition).array[-1]
        if params.temperature == 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / params.temperature
            if params.top_k > 0 and params.top_k < z.size:
                cut = np.sort(z)[-params.top_k]
                z = np.where(z >= cut, z, -np.inf)
            z = z - z.max()
            p = np.exp(z)
            p = p / p.sum()
            nxt = int(rng.choice(z.size, p=p))
        seq.append(nxt)
        out.append(nxt)
        if nxt == EOS:
            break
    return out
