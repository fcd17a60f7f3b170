"""Small decoder-only transformer in plain numpy.

Pre-norm blocks, tanh-approximated GELU, learned positional embeddings,
untied output projection, no attention biases. Gradients are computed by
hand-written reverse accumulation over the forward cache; the contract is
the central finite-difference check in the test suite, not the mechanism.

Parameters live in an ordered name -> ndarray dict so the optimizer,
checkpoints, and finite-difference sweeps can treat the model uniformly.
"""

import io
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (CheckpointError, ConfigError, ContextError,
                     NumericalError, VocabularyError)
from .objective import ObjectiveConfig, batch_terms

DTYPES = {"f32": np.float32, "f64": np.float64}

CHECKPOINT_MAGIC = "conceptlm-ckpt-v1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_context: int = 64
    mlp_ratio: int = 4
    dtype: str = "f64"

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers,
               self.mlp_ratio) < 1:
            raise ConfigError("all model dimensions must be at least 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.max_context < 2:
            raise ConfigError("max_context must be at least 2")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def d_ff(self):
        return self.d_model * self.mlp_ratio

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class ModelParams:
    """Named parameter tensors plus the config they were shaped from."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    def n_params(self):
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def check_finite(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"non-finite values in parameter {name}")
        return self


def param_shapes(config):
    """Closed-form map of parameter names to shapes."""
    d, v, ff = config.d_model, config.vocab_size, config.d_ff
    shapes = {"tok_emb": (v, d), "pos_emb": (config.max_context, d)}
    for i in range(config.n_layers):
        p = f"h{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, ff)
        shapes[p + "mlp.b1"] = (ff,)
        shapes[p + "mlp.w2"] = (ff, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["out_proj"] = (d, v)
    return shapes


def init_params(config, seed):
    """Scaled-normal weights (std 0.02), identity norms, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1217]))
    dt = config.np_dtype
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            tensors[name] = np.ones(shape, dtype=dt)
        elif leaf in ("b", "b1", "b2"):
            tensors[name] = np.zeros(shape, dtype=dt)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(dt)
    return ModelParams(config, tensors)


@dataclass
class ForwardOutput:
    logits: np.ndarray        # [positions, vocab]
    final_hidden: np.ndarray  # [positions, d_model], after the final norm


def _validate_ids(config, token_ids):
    ids = np.asarray(token_ids)
    if ids.ndim != 1 or len(ids) < 1:
        raise ConfigError("token_ids must be a non-empty 1-D sequence")
    if len(ids) > config.max_context:
        raise ContextError(
            f"sequence of {len(ids)} tokens exceeds context {config.max_context}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise VocabularyError("token id outside the vocabulary")
    return ids.astype(np.int64)


def _split_heads(x, n_heads):
    L, d = x.shape
    return np.ascontiguousarray(
        x.reshape(L, n_heads, d // n_heads).transpose(1, 0, 2))


def _merge_heads(x):
    H, L, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(L, H * dh)


def forward_with_cache(params, token_ids):
    """Run the decoder and keep every intermediate needed for backward."""
    cfg = params.config
    ids = _validate_ids(cfg, token_ids)
    L = len(ids)
    t = params.tensors
    # python float, not np.float64 scalar: keeps f32 tensors in f32
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)

    x = t["tok_emb"][ids] + t["pos_emb"][:L]
    layers = []
    for i in range(cfg.n_layers):
        p = f"h{i}."
        x0 = x
        a_in, mean1, rstd1 = kernels.layernorm_fwd(x0, t[p + "ln1.g"],
                                                   t[p + "ln1.b"])
        q = _split_heads(a_in @ t[p + "attn.wq"], cfg.n_heads)
        k = _split_heads(a_in @ t[p + "attn.wk"], cfg.n_heads)
        v = _split_heads(a_in @ t[p + "attn.wv"], cfg.n_heads)
        scores = (q @ k.transpose(0, 2, 1)) * scale
        att = kernels.causal_softmax(scores)
        ao = _merge_heads(att @ v)
        x1 = x0 + ao @ t[p + "attn.wo"]
        m_in, mean2, rstd2 = kernels.layernorm_fwd(x1, t[p + "ln2.g"],
                                                   t[p + "ln2.b"])
        h1 = m_in @ t[p + "mlp.w1"] + t[p + "mlp.b1"]
        hg = kernels.gelu_fwd(h1)
        x = x1 + hg @ t[p + "mlp.w2"] + t[p + "mlp.b2"]
        layers.append(dict(x0=x0, a_in=a_in, mean1=mean1, rstd1=rstd1,
                           q=q, k=k, v=v, att=att, ao=ao, x1=x1,
                           m_in=m_in, mean2=mean2, rstd2=rstd2,
                           h1=h1, hg=hg))
    hf, meanf, rstdf = kernels.layernorm_fwd(x, t["ln_f.g"], t["ln_f.b"])
    logits = hf @ t["out_proj"]
    cache = dict(ids=ids, layers=layers, x_final=x, hf=hf,
                 meanf=meanf, rstdf=rstdf, scale=scale)
    return logits, hf, cache


def forward(params, token_ids):
    logits, hf, _ = forward_with_cache(params, token_ids)
    return ForwardOutput(logits=logits, final_hidden=hf)


def backward_from_dlogits(params, cache, dlogits, grads):
    """Accumulate parameter gradients for one sequence into `grads`."""
    cfg = params.config
    t = params.tensors
    L = len(cache["ids"])

    grads["out_proj"] += cache["hf"].T @ dlogits
    dhf = dlogits @ t["out_proj"].T
    dx, dg, db = kernels.layernorm_bwd(dhf, cache["x_final"], t["ln_f.g"],
                                       cache["meanf"], cache["rstdf"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(cfg.n_layers)):
        p = f"h{i}."
        c = cache["layers"][i]
        # MLP branch: x = x1 + gelu(m_in @ w1 + b1) @ w2 + b2
        grads[p + "mlp.w2"] += c["hg"].T @ dx
        grads[p + "mlp.b2"] += dx.sum(axis=0)
        dhg = dx @ t[p + "mlp.w2"].T
        dh1 = kernels.gelu_bwd(c["h1"], dhg)
        grads[p + "mlp.w1"] += c["m_in"].T @ dh1
        grads[p + "mlp.b1"] += dh1.sum(axis=0)
        dm_in = dh1 @ t[p + "mlp.w1"].T
        dx1, dg, db = kernels.layernorm_bwd(dm_in, c["x1"], t[p + "ln2.g"],
                                            c["mean2"], c["rstd2"])
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx1 = dx1 + dx  # residual
        # attention branch: x1 = x0 + merge(att @ v) @ wo
        grads[p + "attn.wo"] += c["ao"].T @ dx1
        dao = _split_heads(dx1 @ t[p + "attn.wo"].T, cfg.n_heads)
        datt = dao @ c["v"].transpose(0, 2, 1)
        dv = c["att"].transpose(0, 2, 1) @ dao
        dscores = kernels.causal_softmax_bwd(c["att"], datt)
        dq = (dscores @ c["k"]) * cache["scale"]
        dk = (dscores.transpose(0, 2, 1) @ c["q"]) * cache["scale"]
        dq, dk, dv = (_merge_heads(a) for a in (dq, dk, dv))
        grads[p + "attn.wq"] += c["a_in"].T @ dq
        grads[p + "attn.wk"] += c["a_in"].T @ dk
        grads[p + "attn.wv"] += c["a_in"].T @ dv
        da_in = dq @ t[p + "attn.wq"].T + dk @ t[p + "attn.wk"].T \
            + dv @ t[p + "attn.wv"].T
        dx0, dg, db = kernels.layernorm_bwd(da_in, c["x0"], t[p + "ln1.g"],
                                            c["mean1"], c["rstd1"])
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx0 + dx1  # residual

    kernels.embedding_grad(grads["tok_emb"], cache["ids"], dx)
    grads["pos_emb"][:L] += dx
    return grads


def batch_loss(params, batch, objective_cfg):
    """LossBreakdown for a batch without computing gradients."""
    logits_list = [forward_with_cache(params, seq.token_ids)[0]
                   for seq, _ in batch]
    breakdown, _ = batch_terms(logits_list, batch, objective_cfg,
                               want_dlogits=False)
    return breakdown


def loss_and_grad(params, batch, objective_cfg):
    """Combined loss and exact gradients over a batch of annotated sequences.

    `batch` is a list of (Sequence, [ConceptAnnotation]) pairs. Gradients
    have exactly the shapes of the parameter tensors and are summed over the
    batch in input order (deterministic reduction).
    """
    if not isinstance(objective_cfg, ObjectiveConfig):
        raise ConfigError("objective_cfg must be an ObjectiveConfig")
    caches = []
    logits_list = []
    for idx, (seq, _) in enumerate(batch):
        logits, _, cache = forward_with_cache(params, seq.token_ids)
        if not np.all(np.isfinite(logits)):
            raise NumericalError(f"non-finite logits in batch sequence {idx}")
        caches.append(cache)
        logits_list.append(logits)
    breakdown, dlogits_list = batch_terms(logits_list, batch, objective_cfg,
                                          want_dlogits=True)
    if not np.isfinite(breakdown.combined):
        raise NumericalError("non-finite combined loss over batch")
    grads = params.zeros_like()
    for cache, dlogits in zip(caches, dlogits_list):
        backward_from_dlogits(params, cache, dlogits, grads)
    return breakdown, grads


def save_checkpoint(path, params, extra_tensors=None, meta=None):
    """Write config plus named tensors to a self-describing npz container.

    Each entry is a standard .npy payload (magic header, shape, little-endian
    IEEE values); our own versioned magic string guards compatibility.
    """
    arrays = {"param." + k: v for k, v in params.tensors.items()}
    if extra_tensors:
        arrays.update({"extra." + k: v for k, v in extra_tensors.items()})
    header = {"magic": CHECKPOINT_MAGIC,
              "config": json.loads(params.config.to_json()),
              "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, extra_tensors, meta)."""
    try:
        with np.load(path) as z:
            names = set(z.files)
            if "__header__" not in names:
                raise CheckpointError(f"{path}: missing checkpoint header")
            header = json.loads(bytes(z["__header__"]).decode("utf-8"))
            if header.get("magic") != CHECKPOINT_MAGIC:
                raise CheckpointError(
                    f"{path}: bad magic {header.get('magic')!r}")
            config = ModelConfig(**header["config"])
            tensors = {}
            extra = {}
            for name in z.files:
                if name.startswith("param."):
                    tensors[name[len("param."):]] = z[name]
                elif name.startswith("extra."):
                    extra[name[len("extra."):]] = z[name]
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    expected = param_shapes(config)
    if set(tensors) != set(expected):
        raise CheckpointError(f"{path}: tensor names do not match config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: bad shape for {name}")
    return ModelParams(config, tensors).check_finite(), extra, header["meta"]
