"""Stacked LSTM caption decoder.

Layer 0 consumes the concatenation of the previous word embedding and the
attention context; each deeper layer consumes the hidden output of the layer
below. The output head is either a linear regression onto the word embedding
space or a softmax layer over the vocabulary. Dropout (inverted) is applied
to every layer's hidden output in training mode only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import AttentionParams, attend_matrix
from .embedding import EmbeddingTable, START, END, nearest_word
from .encoder import AnnotationSet

REGRESSION = "regression"
SOFTMAX = "softmax"


@dataclass
class LSTMLayerParams:
    """One layer's gate weights, packed (input, forget, output, candidate)."""

    w_x: Tensor  # (4*hidden, input_dim)
    w_h: Tensor  # (4*hidden, hidden)
    b: Tensor    # (4*hidden,)
    hidden: int

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator,
             layer_index: int = 0) -> "LSTMLayerParams":
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias opens the cell path early
        return cls(
            w_x=Tensor(ad.xavier_uniform(rng, input_dim, hidden, (4 * hidden, input_dim)),
                       requires_grad=True, name=f"lstm{layer_index}.w_x"),
            w_h=Tensor(ad.xavier_uniform(rng, hidden, hidden, (4 * hidden, hidden)),
                       requires_grad=True, name=f"lstm{layer_index}.w_h"),
            b=Tensor(b, requires_grad=True, name=f"lstm{layer_index}.b"),
            hidden=hidden,
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]


@dataclass
class DecoderState:
    """Per-layer (hidden, cell) pairs; s_{t-1} for attention is the top hidden."""

    layers: list[tuple[Tensor, Tensor]]

    @classmethod
    def zeros(cls, depth: int, hidden: int) -> "DecoderState":
        return cls([(Tensor(np.zeros(hidden)), Tensor(np.zeros(hidden)))
                    for _ in range(depth)])

    @property
    def top_hidden(self) -> Tensor:
        return self.layers[-1][0]


@dataclass
class OutputHead:
    kind: str       # REGRESSION or SOFTMAX
    w: Tensor       # (out_dim, hidden)
    b: Tensor       # (out_dim,)

    @classmethod
    def init(cls, kind: str, hidden: int, out_dim: int,
             rng: np.random.Generator) -> "OutputHead":
        if kind not in (REGRESSION, SOFTMAX):
            raise ValueError(f"unknown head kind {kind!r}")
        return cls(kind,
                   w=Tensor(ad.xavier_uniform(rng, hidden, out_dim, (out_dim, hidden)),
                            requires_grad=True, name="head.w"),
                   b=Tensor(np.zeros(out_dim), requires_grad=True, name="head.b"))

    def apply(self, hidden: Tensor) -> Tensor:
        return ad.add(ad.matmul(self.w, hidden), self.b)

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


def lstm_step(x: Tensor, layer_state: tuple[Tensor, Tensor],
              params: LSTMLayerParams) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Standard LSTM cell; returns (hidden, (hidden, cell))."""
    h_prev, c_prev = layer_state
    n = params.hidden
    gates = ad.add(ad.add(ad.matmul(params.w_x, x), ad.matmul(params.w_h, h_prev)),
                   params.b)
    i = ad.sigmoid(ad.slice_(gates, 0, n))
    f = ad.sigmoid(ad.slice_(gates, n, 2 * n))
    o = ad.sigmoid(ad.slice_(gates, 2 * n, 3 * n))
    g = ad.tanh(ad.slice_(gates, 3 * n, 4 * n))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, (h, c)


@dataclass
class CaptionModel:
    """Full trainable decoder: stacked LSTM trunk, attention, output head."""

    layers: list[LSTMLayerParams]
    attention: AttentionParams
    head: OutputHead
    embedding: EmbeddingTable
    dropout_rate: float = 0.0

    @classmethod
    def init(cls, embedding: EmbeddingTable, depth: int, hidden: int,
             annot_dim: int, attention_k: int, head_kind: str,
             dropout_rate: float = 0.0, seed: int = 0,
             hidden_nonlinearity: str = "tanh") -> "CaptionModel":
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        rng = np.random.default_rng(seed)
        d = embedding.dim
        layers = []
        for ell in range(depth):
            in_dim = d + annot_dim if ell == 0 else hidden
            layers.append(LSTMLayerParams.init(in_dim, hidden, rng, layer_index=ell))
        attn = AttentionParams.init(annot_dim, d, hidden, attention_k, rng,
                                    hidden_nonlinearity=hidden_nonlinearity)
        out_dim = d if head_kind == REGRESSION else len(embedding.vocab)
        head = OutputHead.init(head_kind, hidden, out_dim, rng)
        return cls(layers, attn, head, embedding, dropout_rate=dropout_rate)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.tensors())
        out.extend(self.attention.tensors())
        out.extend(self.head.tensors())
        return out

    def zero_state(self) -> DecoderState:
        return DecoderState.zeros(self.depth, self.hidden)

    def annotation_matrix(self, annotations: AnnotationSet) -> Tensor:
        return Tensor(annotations.vectors)


def stacked_step(model: CaptionModel, v_prev: Tensor, context: Tensor,
                 state: DecoderState, train_mode: bool = False,
                 rng: np.random.Generator | None = None,
                 dropout_rate: float | None = None) -> tuple[Tensor, DecoderState]:
    """One time step through the full stack; returns (head output, new state)."""
    if len(state.layers) != model.depth:
        raise ValueError("decoder state depth does not match model depth")
    rate = model.dropout_rate if dropout_rate is None else dropout_rate
    x = ad.concat([v_prev, context])
    new_layers = []
    for layer, layer_state in zip(model.layers, state.layers):
        h, new_state = lstm_step(x, layer_state, layer)
        if train_mode and rate > 0.0:
            if rate >= 1.0:
                # degenerate limit, rejected by config validation but kept
                # well-defined for unit tests
                mask = np.zeros(h.data.shape)
            else:
                if rng is None:
                    raise ValueError("train-mode dropout needs an RNG")
                mask = (rng.random(h.data.shape) >= rate) / (1.0 - rate)
            h = ad.mul(h, Tensor(mask))
        new_layers.append(new_state)
        x = h
    return model.head.apply(x), DecoderState(new_layers)


def teacher_forced_loss(model: CaptionModel, annotations: AnnotationSet,
                        caption: list[str], train_mode: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Mean per-step loss with ground-truth previous words fed back."""
    if not caption:
        raise ValueError("empty caption")
    vocab = model.embedding.vocab
    seq = [START] + list(caption) + [END]
    h_matrix = model.annotation_matrix(annotations)
    state = model.zero_state()
    total = None
    steps = 0
    for t in range(1, len(seq)):
        v_prev = Tensor(model.embedding.lookup(seq[t - 1]))
        att = attend_matrix(h_matrix, state.top_hidden, v_prev, model.attention)
        out, state = stacked_step(model, v_prev, att.context, state,
                                  train_mode=train_mode, rng=rng)
        if model.head.kind == REGRESSION:
            step_loss = ad.mse(out, Tensor(model.embedding.lookup(seq[t])))
        else:
            step_loss = ad.cross_entropy(out, vocab.encode(seq[t]))
        total = step_loss if total is None else ad.add(total, step_loss)
        steps += 1
    return ad.scale(total, 1.0 / steps)


def greedy_decode(model: CaptionModel, annotations: AnnotationSet,
                  max_len: int = 20, return_attention: bool = False):
    """Autoregressive decode; deterministic for a fixed model.

    Regression head: each output vector maps to its nearest vocabulary
    embedding. Softmax head: argmax over logits. Stops at <end> or max_len.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    vocab = model.embedding.vocab
    h_matrix = model.annotation_matrix(annotations)
    state = model.zero_state()
    word = START
    tokens: list[str] = []
    attention_trace: list[np.ndarray] = []
    for _ in range(max_len):
        v_prev = Tensor(model.embedding.lookup(word))
        att = attend_matrix(h_matrix, state.top_hidden, v_prev, model.attention)
        out, state = stacked_step(model, v_prev, att.context, state, train_mode=False)
        if model.head.kind == REGRESSION:
            word = nearest_word(out.data, model.embedding)
        else:
            word = vocab.decode(int(np.argmax(out.data)))
        attention_trace.append(att.weights.data.copy())
        if word == END:
            break
        tokens.append(word)
    if return_attention:
        return tokens, attention_trace
    return tokens


def param_count(depth: int, hidden: int, embed_dim: int, vocab_size: int,
                annot_dim: int, attention_k: int, head_kind: str) -> int:
    """Closed-form trainable-parameter count for a configured model."""
    for v in (depth, hidden, embed_dim, vocab_size, annot_dim, attention_k):
        if v <= 0:
            raise ValueError("all model dimensions must be positive")
    total = 0
    for ell in range(depth):
        in_dim = embed_dim + annot_dim if ell == 0 else hidden
        total += 4 * (hidden * in_dim + hidden * hidden + hidden)
    # attention MLP: two hidden-layer matrices, hidden bias, shared output
    # row, state row, output bias
    total += attention_k * annot_dim + attention_k * embed_dim + attention_k
    total += attention_k + hidden + 1
    out_dim = embed_dim if head_kind == REGRESSION else vocab_size
    total += out_dim * hidden + out_dim
    return total
