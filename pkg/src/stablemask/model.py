"""Decoder-only transformer: embeddings, pre-norm blocks (attention + SwiGLU),
final RMSNorm and LM head. Parameters live in a flat name -> Tensor dict."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import AttnTrace, AttnWeights, mha_forward
from .masking import MaskSpec, head_gammas
from .position import PEConfig, alibi_slopes, ape_embed, sinusoidal_table
from .tensor import Tensor, add, cross_entropy, embedding, matmul, no_grad, rmsnorm, swiglu

CHECKPOINT_FORMAT = "stablemask-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_expansion: int = 4
    pe: str = "rope"
    rope_base: float = 10000.0
    mask: str = "stablemask"
    gamma: float = 0.5
    headwise_gamma: bool = False
    pseudo: str = "decay"
    pseudo_value: float = 1e-2
    max_len: int = 64
    tie_embeddings: bool = False
    norm_eps: float = 1e-6
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.mask not in ("vanilla", "stablemask"):
            raise ValueError(f"mask must be 'vanilla' or 'stablemask', got {self.mask!r}")
        if self.vocab_size < 1 or self.max_len < 1 or self.n_layers < 1:
            raise ValueError("vocab_size, max_len and n_layers must be positive")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.pe == "rope" and self.head_dim % 2:
            raise ValueError("RoPE needs an even head dimension")
        PEConfig(kind=self.pe)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def mask_spec(self) -> MaskSpec | None:
        if self.mask == "vanilla":
            return None
        return MaskSpec(head_gammas(self.gamma, self.n_heads, self.headwise_gamma),
                        self.max_len, pseudo=self.pseudo, pseudo_value=self.pseudo_value)

    def pe_config(self) -> PEConfig:
        slopes = alibi_slopes(self.n_heads) if self.pe == "alibi" else []
        return PEConfig(kind=self.pe, rope_base=self.rope_base, alibi_slopes=slopes)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Transformer:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.mask = config.mask_spec()
        self.pe = config.pe_config()
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)
        d, V, std = config.model_dim, config.vocab_size, config.init_std
        hidden = config.ffn_expansion * d

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=dt), requires_grad=True)

        self.params["tok_emb"] = normal(V, d)
        if config.pe == "ape-learn":
            self.params["pos_emb"] = normal(config.max_len, d)
        for l in range(config.n_layers):
            p = f"layers.{l}."
            self.params[p + "attn_norm"] = ones(d)
            for name in ("wq", "wk", "wv"):
                self.params[p + name] = normal(d, d)
            self.params[p + "wo"] = normal(d, d)
            self.params[p + "ffn_norm"] = ones(d)
            self.params[p + "w_gate"] = normal(d, hidden)
            self.params[p + "w_up"] = normal(d, hidden)
            self.params[p + "w_down"] = normal(hidden, d)
        self.params["final_norm"] = ones(d)
        if not config.tie_embeddings:
            self.params["lm_head"] = normal(d, V)
        self.params["lm_bias"] = Tensor(np.zeros(V, dtype=dt), requires_grad=True)
        self._sin_table = sinusoidal_table(config.max_len, d) if config.pe == "ape-sin" else None

    # -- pieces shared with the incremental decoder ----------------------------
    def attn_weights(self, l: int) -> AttnWeights:
        p = f"layers.{l}."
        return AttnWeights(self.params[p + "wq"], self.params[p + "wk"],
                           self.params[p + "wv"], self.params[p + "wo"])

    def embed(self, tokens, positions) -> Tensor:
        x = embedding(self.params["tok_emb"], tokens)
        if self.config.pe == "ape-learn":
            if np.max(positions) >= self.config.max_len:
                raise ValueError("learnable position table has no entry beyond max_len")
            x = add(x, ape_embed(positions, self.params["pos_emb"]))
        elif self.config.pe == "ape-sin":
            x = add(x, sinusoidal_table(int(np.max(positions)) + 1, self.config.model_dim)[positions])
        return x

    def ffn(self, l: int, x: Tensor) -> Tensor:
        p = f"layers.{l}."
        h = rmsnorm(x, self.params[p + "ffn_norm"], self.config.norm_eps)
        return swiglu(h, self.params[p + "w_gate"], self.params[p + "w_up"], self.params[p + "w_down"])

    def head(self, x: Tensor) -> Tensor:
        h = rmsnorm(x, self.params["final_norm"], self.config.norm_eps)
        w = self.params.get("lm_head")
        if w is None:
            w = self.params["tok_emb"].transpose()
        return add(matmul(h, w), self.params["lm_bias"])

    # -- full forward ---------------------------------------------------------
    def forward(self, tokens, capture: bool = False, keep_logits: bool = False,
                return_hidden: bool = False):
        """Logits for ``tokens`` of shape ``(n,)`` or ``(B, n)``.

        Returns ``(logits, traces)``; ``traces`` is a per-layer list of
        :class:`AttnTrace` when ``capture`` is set. With ``return_hidden`` a
        third item lists the residual stream after each attention sub-layer
        and after each full block.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        n = tokens.shape[-1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        positions = np.arange(n)
        x = self.embed(tokens, positions)
        traces, hidden = [], []
        for l in range(self.config.n_layers):
            h = rmsnorm(x, self.params[f"layers.{l}.attn_norm"], self.config.norm_eps)
            a, tr = mha_forward(h, self.attn_weights(l), self.config.n_heads, self.pe, self.mask,
                                positions=positions, capture=capture, keep_logits=keep_logits)
            x = add(x, a)
            if return_hidden:
                hidden.append(x.data.copy())
            x = add(x, self.ffn(l, x))
            if return_hidden:
                hidden.append(x.data.copy())
            if capture:
                traces.append(tr)
        logits = self.head(x)
        if squeeze:
            logits = logits[0]
            traces = [AttnTrace(t.probs[0], t.alpha[0], None if t.logits is None else t.logits[0])
                      for t in traces]
            hidden = [h[0] for h in hidden]
        out = (logits, traces if capture else None)
        return out + (hidden,) if return_hidden else out

    def forward_logits(self, tokens) -> np.ndarray:
        with no_grad():
            return self.forward(tokens)[0].data

    def loss(self, inputs, targets, weights=None) -> Tensor:
        logits, _ = self.forward(inputs)
        return cross_entropy(logits, targets, weights)

    def loss_lm(self, tokens) -> Tensor:
        """Next-token cross-entropy, averaged over positions."""
        tokens = np.asarray(tokens, dtype=np.int64)
        return self.loss(tokens[..., :-1], tokens[..., 1:])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: Transformer, step: int = 0, seed: int | None = None,
                    optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    """Write an ``.npz`` container: raw parameter arrays plus a JSON header.

    Arrays are stored verbatim, so a save/load round trip is bit-exact.
    """
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": asdict(model.config), "step": int(step), "seed": seed,
            "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optimizer_state is not None:
        meta["optimizer_step"] = int(optimizer_state.get("step", 0))
        for k, v in optimizer_state.get("m", {}).items():
            arrays[f"opt_m/{k}"] = v
        for k, v in optimizer_state.get("v", {}).items():
            arrays[f"opt_v/{k}"] = v
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, meta, optimizer_state_or_None)``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        m = {k[len("opt_m/"):]: z[k] for k in z.files if k.startswith("opt_m/")}
        v = {k[len("opt_v/"):]: z[k] for k in z.files if k.startswith("opt_v/")}
    model = Transformer(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(params)
    opt = {"m": m, "v": v, "step": meta.get("optimizer_step", 0)} if m else None
    return model, meta, opt


# -- absolute-position construction -------------------------------------------

def xi_closed_form(n: int, gamma: float) -> np.ndarray:
    """``xi_i = i / (i + sum_{j=i}^{n-1} exp(-j*gamma))`` for i = 1..n."""
    i = np.arange(1, n + 1, dtype=float)
    tail = np.array([sum(math.exp(-j * gamma) for j in range(k, n)) for k in range(1, n + 1)])
    return i / (i + tail)


def construct_position_probe_weights(model: Transformer, head: int = 0) -> None:
    """Set layer-0 weights so hidden dimension 1 (0-based) holds ``xi_i``.

    Dimension 0 of every token embedding becomes 1 and dimension 1 becomes 0;
    the chosen head gets zero query/key maps, a value map reading dimension 0
    and an output map writing dimension 1. No other head and no FFN writes to
    those two dimensions. The remaining embedding coordinates are rescaled to
    a common norm so the pre-attention RMSNorm divides every token by the
    same factor, which the value map undoes.
    """
    cfg = model.config
    if cfg.mask != "stablemask":
        raise ValueError("position construction needs the StableMask mask")
    if cfg.pe not in ("none", "rope"):
        raise ValueError(f"construction assumes zero attention logits; pe={cfg.pe!r} adds position terms")
    d, H = cfg.model_dim, cfg.n_heads
    if d < 2:
        raise ValueError("need two reserved hidden dimensions")
    if not 0 <= head < H:
        raise ValueError(f"head {head} out of range")
    P = model.params
    E = P["tok_emb"].data
    E[:, 0] = 1.0
    E[:, 1] = 0.0
    tail_ms = 0.0
    if d > 2:
        tail = E[:, 2:]
        norms = np.linalg.norm(tail, axis=1, keepdims=True)
        fallback = np.zeros_like(tail)
        fallback[:, 0] = 1.0
        E[:, 2:] = np.where(norms > 0, tail / np.where(norms > 0, norms, 1.0), fallback)
        tail_ms = 1.0
    ms = (1.0 + tail_ms) / d
    p = "layers.0."
    P[p + "attn_norm"].data[0] = 1.0
    dh = cfg.head_dim
    sl = slice(head * dh, (head + 1) * dh)
    for name in ("wq", "wk", "wv"):
        P[p + name].data[:, sl] = 0.0
    P[p + "wv"].data[0, head * dh] = math.sqrt(ms + cfg.norm_eps)
    wo = P[p + "wo"].data
    wo[:, 0:2] = 0.0
    wo[sl, :] = 0.0
    wo[head * dh, 1] = 1.0
    P[p + "w_down"].data[:, 0:2] = 0.0
