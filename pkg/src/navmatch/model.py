"""Query structure extractor (GCN + max pool) and the masked-node navigator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels as K
from .euler import PAD, CapacityError, MaskedNodeSequence
from .graph import LabeledGraph

PROFILES = {
    "paper": dict(d=256, layers=4, heads=8, d_ff=1024),
    "desk": dict(d=32, layers=2, heads=2, d_ff=64),
}

LAYER_KEYS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1.gain", "ln1.bias", "w1", "b1", "w2", "b2", "ln2.gain", "ln2.bias",
)


class VocabularyError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    n_labels: int
    d: int = 32
    layers: int = 2
    heads: int = 2
    d_ff: int = 64
    window: int = 64
    max_len: int = 256
    gcn_layers: int = 2

    @classmethod
    def from_profile(cls, profile: str, vocab: int, n_labels: int, **overrides):
        return cls(vocab=vocab, n_labels=n_labels, **{**PROFILES[profile], **overrides})

    def validate(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.max_len < 3:
            raise ValueError("max_len must leave room for the signal and anchor rows")

    def shapes(self) -> dict[str, tuple]:
        d = self.d
        s = {"qs.label_embed": (self.n_labels, d)}
        for l in range(self.gcn_layers):
            s[f"qs.gcn.{l}.weight"] = (d, d)
        s["nav.token_embed"] = (self.vocab + 2, d)
        s["nav.node_pos_embed"] = (self.window + 1, d)
        s["nav.seq_pos_embed"] = (self.max_len, d)
        for k in range(self.layers):
            pre = f"nav.layer.{k}."
            for w in ("wq", "wk", "wv", "wo"):
                s[pre + w] = (d, d)
                s[pre + "b" + w[1]] = (d,)
            s[pre + "ln1.gain"] = (d,)
            s[pre + "ln1.bias"] = (d,)
            s[pre + "w1"] = (d, self.d_ff)
            s[pre + "b1"] = (self.d_ff,)
            s[pre + "w2"] = (self.d_ff, d)
            s[pre + "b2"] = (d,)
            s[pre + "ln2.gain"] = (d,)
            s[pre + "ln2.bias"] = (d,)
        s["nav.head.weight"] = (self.vocab, d)
        s["nav.head.bias"] = (self.vocab,)
        return s


def orthogonal(rows, cols, rng):
    """Rows orthonormal when rows <= cols, otherwise columns orthonormal."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def sinusoid(rows, cols):
    """Sine/cosine table whose dot products depend on the offset between rows."""
    j = np.arange(cols)
    ang = np.arange(rows)[:, None] / 10000.0 ** (2 * (j // 2) / cols)
    return np.where(j % 2 == 0, np.sin(ang), np.cos(ang))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    cfg.validate()
    d = cfg.d
    params = {}
    for name, shape in cfg.shapes().items():
        if name.endswith(("label_embed", "token_embed")):
            w = rng.standard_normal(shape) / np.sqrt(d)
        elif name.endswith("node_pos_embed"):
            w = orthogonal(shape[0], shape[1], rng)
        elif name.endswith("seq_pos_embed"):
            # relative offsets are readable from the start; trains faster than small noise
            w = sinusoid(*shape)
        elif name.endswith(".gain"):
            w = np.ones(shape)
        elif len(shape) == 1:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) * np.sqrt(2.0 / (shape[0] + shape[1]))
        params[name] = w
    return params


class NavigatorModel:
    """All learnable tensors plus hyperparameters.

    ``params`` maps tensor names to arrays of ``dtype``; the same object is
    shared read-only by concurrent inference.
    """

    def __init__(self, config: ModelConfig, params: dict, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in params.items()}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32):
        return cls(config, init_params(config, np.random.default_rng(seed)), dtype)

    def copy(self):
        return NavigatorModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    def layer(self, k: int) -> dict:
        pre = f"nav.layer.{k}."
        return {key: self.params[pre + key] for key in LAYER_KEYS}

    def gcn_weights(self) -> list:
        return [self.params[f"qs.gcn.{l}.weight"] for l in range(self.config.gcn_layers)]

    # -- query structure extractor ----------------------------------------

    def _graph_batch(self, queries):
        n = max(q.vertex_count for q in queries)
        labels = np.zeros((len(queries), n), dtype=np.int64)
        mask = np.zeros((len(queries), n), dtype=bool)
        a_hat = np.zeros((len(queries), n, n), dtype=self.dtype)
        for b, q in enumerate(queries):
            if q.labels and max(q.labels) >= self.config.n_labels:
                raise VocabularyError(f"query label {max(q.labels)} outside the {self.config.n_labels}-label vocabulary")
            labels[b, : q.vertex_count] = q.labels
            mask[b, : q.vertex_count] = True
            a_hat[b] = K.normalized_adjacency(q.adjacency, n)
        return labels, mask, a_hat

    def extract_forward(self, queries):
        labels, mask, a_hat = self._graph_batch(queries)
        h0 = self.params["qs.label_embed"][labels] * mask[:, :, None]
        sig, cache = K.gcn_forward(h0, a_hat, self.gcn_weights(), mask)
        return sig, (labels, mask, a_hat, cache)

    def extract_backward(self, dsig, cache):
        labels, mask, a_hat, gcache = cache
        dh0, dws = K.gcn_backward(dsig, gcache, a_hat, self.gcn_weights())
        grads = {f"qs.gcn.{l}.weight": dw for l, dw in enumerate(dws)}
        demb = np.zeros_like(self.params["qs.label_embed"])
        np.add.at(demb, labels[mask], dh0[mask])
        grads["qs.label_embed"] = demb
        return grads

    # -- navigator ----------------------------------------------------------

    def token_rows(self, tokens):
        v = self.config.vocab
        tokens = np.asarray(tokens)
        if tokens.size and tokens.max() >= v:
            raise VocabularyError(f"token {tokens.max()} outside the {v}-vertex vocabulary")
        return np.where(tokens >= 0, tokens, np.where(tokens == PAD, v, v + 1))

    def embed(self, tokens, positions, lengths, sig):
        """Build X_in = [sig, anchor, E_0..E_{l-1}] + sequence-index embeddings."""
        cfg = self.config
        bsz, l = tokens.shape
        if l + 2 > cfg.max_len:
            raise CapacityError(f"sequence of length {l} needs {l + 2} rows but max_len={cfg.max_len}")
        if positions.size and positions.max() >= cfg.window:
            raise ShapeError(f"position id {positions.max()} outside window N={cfg.window}")
        p = self.params
        rows = self.token_rows(tokens)
        x = np.empty((bsz, l + 2, cfg.d), dtype=self.dtype)
        x[:, 0] = sig
        x[:, 1] = p["nav.token_embed"][cfg.vocab + 1] + p["nav.node_pos_embed"][cfg.window]
        x[:, 2:] = p["nav.token_embed"][rows] + p["nav.node_pos_embed"][positions]
        x += p["nav.seq_pos_embed"][: l + 2]
        key_bias = None
        lengths = np.asarray(lengths)
        if np.any(lengths < l):
            key_bias = np.where(np.arange(l + 2)[None, :] < (lengths + 2)[:, None], 0.0, K.NEG_INF).astype(self.dtype)
        return x, key_bias, (rows, positions, l)

    def embed_backward(self, dx, cache):
        rows, positions, l = cache
        cfg = self.config
        p = self.params
        g = {}
        dtok = np.zeros_like(p["nav.token_embed"])
        dpos = np.zeros_like(p["nav.node_pos_embed"])
        body = dx[:, 2:]
        np.add.at(dtok, rows.ravel(), body.reshape(-1, cfg.d))
        np.add.at(dpos, positions.ravel(), body.reshape(-1, cfg.d))
        anchor = dx[:, 1].sum(axis=0)
        dtok[cfg.vocab + 1] += anchor
        dpos[cfg.window] += anchor
        dseq = np.zeros_like(p["nav.seq_pos_embed"])
        dseq[: l + 2] = dx.sum(axis=0)
        g["nav.token_embed"] = dtok
        g["nav.node_pos_embed"] = dpos
        g["nav.seq_pos_embed"] = dseq
        return g, dx[:, 0]

    def decode(self, x, key_bias=None):
        """Decoder stack on X_in; returns head logits read at the anchor row."""
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != cfg.d:
            raise ShapeError(f"expected input of shape (B, L, {cfg.d}), got {x.shape}")
        caches = []
        h = x
        for k in range(cfg.layers):
            h, c = K.decoder_layer_forward(h, self.layer(k), cfg.heads, key_bias)
            caches.append(c)
        h_cls = h[:, 1]
        # (B, 1, d) stacks keep each row's result independent of the batch size
        logits = (h[:, 1:2] @ self.params["nav.head.weight"].T)[:, 0] + self.params["nav.head.bias"]
        return logits, (caches, h_cls, h.shape)

    def decode_backward(self, dlogits, cache):
        caches, h_cls, shape = cache
        cfg = self.config
        grads = {
            "nav.head.weight": dlogits.T @ h_cls,
            "nav.head.bias": dlogits.sum(axis=0),
        }
        dh = np.zeros(shape, dtype=dlogits.dtype)
        dh[:, 1] = dlogits @ self.params["nav.head.weight"]
        for k in range(cfg.layers - 1, -1, -1):
            dh, g = K.decoder_layer_backward(dh, caches[k], self.layer(k), cfg.heads)
            for key, val in g.items():
                grads[f"nav.layer.{k}.{key}"] = val
        return dh, grads

    # -- composed passes ----------------------------------------------------

    def logits(self, tokens, positions, lengths, sig):
        x, key_bias, _ = self.embed(tokens, positions, lengths, sig)
        return self.decode(x, key_bias)[0]

    def probabilities(self, tokens, positions, lengths, sig):
        return K.softmax(self.logits(tokens, positions, lengths, sig))

    def loss_and_grads(self, queries, tokens, positions, lengths, targets, train_extractor=True):
        """Mean masked-node loss over the batch and its gradient for every tensor."""
        targets = np.asarray(targets)
        bsz = len(targets)
        sig, qcache = self.extract_forward(queries)
        x, key_bias, ecache = self.embed(tokens, positions, lengths, sig)
        logits, dcache = self.decode(x, key_bias)
        logp = K.log_softmax(logits)
        losses = -logp[np.arange(bsz), targets]
        dlogits = np.exp(logp)
        dlogits[np.arange(bsz), targets] -= 1.0
        dlogits /= bsz
        dx, grads = self.decode_backward(dlogits, dcache)
        g_emb, dsig = self.embed_backward(dx, ecache)
        grads.update(g_emb)
        if train_extractor:
            grads.update(self.extract_backward(dsig, qcache))
        else:
            for name in self.params:
                if name.startswith("qs."):
                    grads[name] = np.zeros_like(self.params[name])
        return losses, grads


def pad_sequences(seqs):
    """Stack token/position arrays of varying length; returns tokens, positions, lengths."""
    lengths = np.array([len(s[0]) for s in seqs], dtype=np.int64)
    l = int(lengths.max())
    tokens = np.full((len(seqs), l), PAD, dtype=np.int64)
    positions = np.zeros((len(seqs), l), dtype=np.int64)
    for b, (tok, pos) in enumerate(seqs):
        tokens[b, : len(tok)] = tok
        positions[b, : len(pos)] = pos
    return tokens, positions, lengths


# -- single-instance operations ---------------------------------------------


def qs_extract(q: LabeledGraph, model: NavigatorModel) -> np.ndarray:
    return model.extract_forward([q])[0][0]


def assemble_input(seq: MaskedNodeSequence, sig, model: NavigatorModel) -> np.ndarray:
    tokens = np.asarray(seq.tokens)[None, :]
    positions = np.asarray(seq.position_ids)[None, :]
    x, _, _ = model.embed(tokens, positions, [tokens.shape[1]], np.asarray(sig)[None, :])
    return x[0]


def navigator_forward(x, model: NavigatorModel) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 2:
        raise ShapeError(f"expected (l+2, d) input, got shape {x.shape}")
    return K.softmax(model.decode(x[None])[0])[0]


def navigator_backward(x, model: NavigatorModel, t: int):
    """Gradient of -log P_t for every decoder/head tensor, plus ``"input"`` = dL/dX_in."""
    if not 0 <= t < model.config.vocab:
        raise ValueError(f"target {t} outside vocabulary")
    x = np.asarray(x, dtype=model.dtype)[None]
    logits, cache = model.decode(x)
    p = K.softmax(logits)
    dlogits = p.copy()
    dlogits[0, t] -= 1.0
    dx, grads = model.decode_backward(dlogits, cache)
    grads["input"] = dx[0]
    return grads


def sequence_loss_and_grads(model, q, seq: MaskedNodeSequence, t: int):
    """End-to-end loss for one sample, gradients reaching every tensor."""
    tokens = np.asarray(seq.tokens)[None]
    positions = np.asarray(seq.position_ids)[None]
    losses, grads = model.loss_and_grads([q], tokens, positions, [tokens.shape[1]], [t])
    return float(losses[0]), grads

