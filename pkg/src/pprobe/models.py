"""LSTM seq2seq translator, LSTM language model and the MLP probe.

All models keep their parameters in an ordered ``name -> Tensor`` dict with
dotted names (``encoder.lstm0_fwd.w_ih``) so they round-trip through the
PPCK checkpoint format.  Batched forward passes take padded id matrices and
boolean masks from :mod:`pprobe.data`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, Batch

NEG_INF = -1e9


@dataclass
class ModelConfig:
    emb: int = 64
    hidden: int = 64
    enc_layers: int = 1
    dec_layers: int = 1
    attn: int = 64
    probe_hidden: int = 64
    probe_layers: int = 1
    dropout: float = 0.0
    init_scale: float = 0.1


class ParamStore:
    """Ordered parameter dict with a group tag per name (``encoder``, ``decoder``, ``probe``)."""

    def __init__(self, rng: np.random.Generator, init_scale: float):
        self.params: dict[str, Tensor] = {}
        self._rng = rng
        self._scale = init_scale

    def new(self, name: str, shape: Sequence[int], value: float | None = None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        if value is None:
            data = self._rng.uniform(-self._scale, self._scale, size=tuple(shape))
        else:
            data = np.full(tuple(shape), value, dtype=np.float64)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def group(self, prefix: str) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.split(".", 1)[0] == prefix]


class _Module:
    store: ParamStore

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def group(self, prefix: str) -> list[Tensor]:
        return self.store.group(prefix)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[0]}")
        for n, t in self.params.items():
            value = np.asarray(state[n], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{n}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.params)

    def load(self, path) -> None:
        self.load_state_dict(ad.load_checkpoint(path))


# ----------------------------------------------------------------------- LSTM

class LSTMLayer:
    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int):
        self.hidden = hidden
        self.w_ih = store.new(f"{name}.w_ih", (n_in, 4 * hidden))
        self.w_hh = store.new(f"{name}.w_hh", (hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate
        self.b = store.new(f"{name}.b", (4 * hidden,))
        self.b.data = bias

    def cell(self, x_proj: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One step given the precomputed input projection ``x @ w_ih + b``."""
        d = self.hidden
        gates = x_proj + h @ self.w_hh
        ifo = ad.sigmoid(gates[:, :3 * d])
        g = ad.tanh(gates[:, 3 * d:])
        c_new = ifo[:, d:2 * d] * c + ifo[:, :d] * g
        h_new = ifo[:, 2 * d:] * ad.tanh(c_new)
        return h_new, c_new

    def run(self, xs: Tensor, mask: np.ndarray, reverse: bool = False) -> list[Tensor]:
        """Hidden state per position for ``xs`` of shape (B, T, n_in).

        Padded positions carry the previous state through unchanged, so a
        reversed pass starts from zeros at each sequence's last real token.
        """
        b, t_len, _ = xs.shape
        proj = xs @ self.w_ih + self.b
        h = Tensor(np.zeros((b, self.hidden)))
        c = Tensor(np.zeros((b, self.hidden)))
        out: list[Tensor | None] = [None] * t_len
        steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in steps:
            h_new, c_new = self.cell(proj[:, t, :], h, c)
            col = mask[:, t]
            if col.all():
                h, c = h_new, c_new
            else:
                m = Tensor(col[:, None].astype(np.float64))
                h = h + m * (h_new - h)
                c = c + m * (c_new - c)
            out[t] = h
        return out


def _mask_bias(mask: np.ndarray) -> Tensor:
    return Tensor(np.where(mask, 0.0, NEG_INF))


# -------------------------------------------------------------------- seq2seq

class Seq2SeqModel(_Module):
    """Bidirectional LSTM encoder, attentional LSTM decoder.

    Encoder output width is ``2 * hidden``.  Attention is additive: the score
    of encoder state ``h_t`` for decoder state ``s`` is ``v . tanh(W h_t + U s)``.
    """

    def __init__(self, src_vocab: int, tgt_vocab: int, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        self.store = store = ParamStore(rng, cfg.init_scale)
        d = cfg.hidden
        self.src_emb = store.new("encoder.embedding", (src_vocab, cfg.emb))
        self.enc_fwd, self.enc_bwd = [], []
        n_in = cfg.emb
        for i in range(cfg.enc_layers):
            self.enc_fwd.append(LSTMLayer(store, f"encoder.lstm{i}_fwd", n_in, d))
            self.enc_bwd.append(LSTMLayer(store, f"encoder.lstm{i}_bwd", n_in, d))
            n_in = 2 * d
        self.width = 2 * d

        self.tgt_emb = store.new("decoder.embedding", (tgt_vocab, cfg.emb))
        self.init_w = store.new("decoder.init.w", (self.width, d))
        self.init_b = store.new("decoder.init.b", (d,), 0.0)
        self.att_enc = store.new("decoder.attention.w_enc", (self.width, cfg.attn))
        self.att_dec = store.new("decoder.attention.w_dec", (d, cfg.attn))
        self.att_v = store.new("decoder.attention.v", (cfg.attn, 1))
        self.dec = []
        n_in = cfg.emb + self.width
        for i in range(cfg.dec_layers):
            self.dec.append(LSTMLayer(store, f"decoder.lstm{i}", n_in, d))
            n_in = d
        self.out_w = store.new("decoder.out.w", (d + self.width, tgt_vocab))
        self.out_b = store.new("decoder.out.b", (tgt_vocab,), 0.0)

    # encoder ----------------------------------------------------------
    def encode_batch(self, src: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        src = np.asarray(src)
        if src.size and (src.min() < 0 or src.max() >= self.src_vocab):
            raise ValueError(f"source id outside vocabulary of size {self.src_vocab}")
        x = ad.dropout(ad.embedding(self.src_emb, src), self.cfg.dropout, rng)
        for fwd, bwd in zip(self.enc_fwd, self.enc_bwd):
            hf = fwd.run(x, mask)
            hb = bwd.run(x, mask, reverse=True)
            x = ad.stack([ad.concat([a, b], axis=-1) for a, b in zip(hf, hb)], axis=1)
        return x

    # decoder ----------------------------------------------------------
    def _start(self, H: Tensor, mask: np.ndarray):
        lengths = mask.sum(axis=1, keepdims=True).astype(np.float64)
        weights = Tensor((mask / lengths)[:, :, None])
        pooled = ad.sum_(H * weights, axis=1)
        h0 = ad.tanh(pooled @ self.init_w + self.init_b)
        b = H.shape[0]
        hs = [h0] + [Tensor(np.zeros((b, self.cfg.hidden))) for _ in self.dec[1:]]
        cs = [Tensor(np.zeros((b, self.cfg.hidden))) for _ in self.dec]
        keys = H @ self.att_enc
        return hs, cs, keys

    def _step(self, emb_t: Tensor, hs, cs, H: Tensor, keys: Tensor, bias: Tensor):
        b, t_len, _ = H.shape
        query = ad.reshape(hs[-1] @ self.att_dec, (b, 1, self.cfg.attn))
        scores = ad.reshape(ad.tanh(keys + query) @ self.att_v, (b, t_len)) + bias
        alpha = ad.softmax(scores)
        context = ad.sum_(ad.reshape(alpha, (b, t_len, 1)) * H, axis=1)
        x = ad.concat([emb_t, context], axis=-1)
        new_h, new_c = [], []
        for layer, h, c in zip(self.dec, hs, cs):
            h, c = layer.cell(x @ layer.w_ih + layer.b, h, c)
            new_h.append(h)
            new_c.append(c)
            x = h
        return new_h, new_c, ad.concat([new_h[-1], context], axis=-1)

    def loss(self, batch: Batch, H: Tensor | None = None, rng: np.random.Generator | None = None) -> Tensor:
        """Mean per-target-token NLL (nats) under teacher forcing, EOS included."""
        if not batch.tgt_mask.any():
            raise ValueError("empty target")
        if H is None:
            H = self.encode_batch(batch.src, batch.src_mask, rng)
        hs, cs, keys = self._start(H, batch.src_mask)
        bias = _mask_bias(batch.src_mask)
        emb = ad.dropout(ad.embedding(self.tgt_emb, batch.tgt_in), self.cfg.dropout, rng)
        feats = []
        for u in range(batch.tgt_in.shape[1]):
            hs, cs, feat = self._step(emb[:, u, :], hs, cs, H, keys, bias)
            feats.append(feat)
        feats = ad.dropout(ad.stack(feats, axis=1), self.cfg.dropout, rng)
        logits = feats @ self.out_w + self.out_b
        return ad.nll(ad.log_softmax(logits), batch.tgt_out, batch.tgt_mask)

    def greedy(self, src: np.ndarray, mask: np.ndarray, max_len: int) -> list[list[int]]:
        """Greedy decoding; each output stops before its first EOS."""
        with ad.no_grad():
            H = self.encode_batch(src, mask)
            hs, cs, keys = self._start(H, mask)
            bias = _mask_bias(mask)
            b = src.shape[0]
            prev = np.full(b, BOS, dtype=np.int64)
            out = [[] for _ in range(b)]
            done = np.zeros(b, dtype=bool)
            for _ in range(max_len):
                hs, cs, feat = self._step(ad.embedding(self.tgt_emb, prev), hs, cs, H, keys, bias)
                logits = feat.data @ self.out_w.data + self.out_b.data
                prev = logits.argmax(axis=-1)
                for i in range(b):
                    if not done[i]:
                        if prev[i] == EOS:
                            done[i] = True
                        else:
                            out[i].append(int(prev[i]))
                if done.all():
                    break
        return out


# ------------------------------------------------------------ language model

class LanguageModel(_Module):
    """Unidirectional LSTM LM; the top LSTM layer is the probed representation."""

    def __init__(self, vocab: int, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.src_vocab = vocab
        self.store = store = ParamStore(rng, cfg.init_scale)
        self.emb = store.new("encoder.embedding", (vocab, cfg.emb))
        self.layers = []
        n_in = cfg.emb
        for i in range(cfg.enc_layers):
            self.layers.append(LSTMLayer(store, f"encoder.lstm{i}", n_in, cfg.hidden))
            n_in = cfg.hidden
        self.width = cfg.hidden
        self.out_w = store.new("decoder.out.w", (cfg.hidden, vocab))
        self.out_b = store.new("decoder.out.b", (vocab,), 0.0)

    def encode_batch(self, src: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """Row ``i`` is the state after reading tokens ``0..i``."""
        src = np.asarray(src)
        if src.size and (src.min() < 0 or src.max() >= self.src_vocab):
            raise ValueError(f"token id outside vocabulary of size {self.src_vocab}")
        x = ad.dropout(ad.embedding(self.emb, src), self.cfg.dropout, rng)
        for layer in self.layers:
            x = ad.stack(layer.run(x, mask), axis=1)
        return x

    def loss(self, batch: Batch, H: Tensor | None = None, rng: np.random.Generator | None = None) -> Tensor:
        """Mean NLL (nats) of tokens 2..N given their prefixes."""
        if batch.src.shape[1] < 2 or not batch.src_mask[:, 1:].any():
            raise ValueError("language model loss needs sequences of length >= 2")
        if H is None:
            H = self.encode_batch(batch.src, batch.src_mask, rng)
        feats = ad.dropout(H[:, :-1, :], self.cfg.dropout, rng)
        logits = feats @ self.out_w + self.out_b
        return ad.nll(ad.log_softmax(logits), batch.src[:, 1:], batch.src_mask[:, 1:])


# -------------------------------------------------------------------- probe

class ProbeModel(_Module):
    """MLP from a per-token representation to a log-distribution over labels."""

    def __init__(self, n_in: int, n_labels: int, cfg: ModelConfig, rng: np.random.Generator):
        self.n_labels = n_labels
        self.store = store = ParamStore(rng, cfg.init_scale)
        self.layers = []
        width = n_in
        for i in range(cfg.probe_layers):
            w = store.new(f"probe.fc{i}.w", (width, cfg.probe_hidden))
            w.data = rng.normal(0.0, 1.0 / np.sqrt(width), size=w.shape)
            self.layers.append((w, store.new(f"probe.fc{i}.b", (cfg.probe_hidden,), 0.0)))
            width = cfg.probe_hidden
        self.out_w = store.new("probe.out.w", (width, n_labels))
        self.out_b = store.new("probe.out.b", (n_labels,), 0.0)

    def log_probs(self, H: Tensor) -> Tensor:
        x = H
        for w, b in self.layers:
            x = ad.relu(x @ w + b)
        return ad.log_softmax(x @ self.out_w + self.out_b)


def probe_loss(probe: ProbeModel, H: Tensor, labels, mask=None) -> Tensor:
    """Mean per-token probe cross-entropy in nats over unmasked positions."""
    labels = np.asarray(labels)
    if H.shape[:-1] != labels.shape:
        raise ValueError(f"representation rows {H.shape[:-1]} do not match labels {labels.shape}")
    return ad.nll(probe.log_probs(H), labels, mask)


def encode(model, x: Sequence[int]) -> Tensor:
    """Per-token representation matrix for one sentence: (N, width)."""
    ids = np.asarray(x, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("encode expects a non-empty 1-D id sequence")
    H = model.encode_batch(ids[None, :], np.ones((1, ids.size), dtype=bool))
    return H[0]


def nmt_loss(model: Seq2SeqModel, batch: Batch, H: Tensor | None = None, rng=None) -> Tensor:
    return model.loss(batch, H, rng)


def lm_loss(model: LanguageModel, batch: Batch, H: Tensor | None = None, rng=None) -> Tensor:
    return model.loss(batch, H, rng)
