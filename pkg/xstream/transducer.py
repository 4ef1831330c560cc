"""Stateless predictor, joiner and the exact transducer loss."""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import special

from xstream import numerics as nx
from xstream.exceptions import NonFiniteError, ShapeError
from xstream.numerics import Tensor
from xstream.utils import init_weight

logger = logging.getLogger(__name__)

BLANK_ID = 0
BLANK_TOKEN = "<blank>"

BRUTEFORCE_MAX_FRAMES = 8
BRUTEFORCE_MAX_LABELS = 6

@dataclass(frozen=True)
class Vocab:
    """
    Token inventory with the blank symbol at id 0.

    Parameters
    ----------
    tokens : tuple of str
        Token strings by id; ``tokens[0]`` must be `BLANK_TOKEN`.
    """
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != BLANK_TOKEN:
            raise ValueError(f"token 0 must be {BLANK_TOKEN!r}.")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("tokens must be unique.")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocab":
        """Word vocabulary over lowercased, whitespace-split `texts`."""
        words = sorted({w for text in texts for w in text.lower().split()})
        return cls((BLANK_TOKEN, *words))

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        """Vocabulary ``<blank>, t1, ..., t{size-1}`` of the synthetic task."""
        if size < 2:
            raise ValueError("a vocabulary needs at least one token besides blank.")
        return cls((BLANK_TOKEN, *(f"t{k}" for k in range(1, size))))

    def encode(self, text: str) -> list[int]:
        index = {tok: i for i, tok in enumerate(self.tokens)}
        ids = []
        for word in text.lower().split():
            if word not in index or word == BLANK_TOKEN:
                raise ValueError(f"word {word!r} is not in the vocabulary.")
            ids.append(index[word])
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != BLANK_ID)


@dataclass(frozen=True)
class PredictorConfig:
    embed_dim: int = 16
    kernel: int = 2 # previous tokens seen by each predictor row

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError("predictor kernel must be >= 1.")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1.")


@dataclass(frozen=True)
class JoinerConfig:
    joint_dim: int = 32

    def __post_init__(self):
        if self.joint_dim < 1:
            raise ValueError("joint_dim must be >= 1.")


def init_predictor_params(
    cfg: PredictorConfig,
    vocab_size: int,
    rng: np.random.Generator,
    dtype=np.float32,
    ) -> dict[str, Tensor]:
    e = cfg.embed_dim
    return {
        "predictor.embed": Tensor(rng.standard_normal((vocab_size, e)).astype(dtype)),
        "predictor.conv": Tensor(init_weight(rng, (cfg.kernel, e, e), dtype)),
        "predictor.conv_bias": Tensor(np.zeros(e, dtype=dtype)),
    }

def init_joiner_params(
    cfg: JoinerConfig,
    d_model: int,
    embed_dim: int,
    vocab_size: int,
    rng: np.random.Generator,
    dtype=np.float32,
    ) -> dict[str, Tensor]:
    j = cfg.joint_dim
    return {
        "joiner.enc_proj": Tensor(init_weight(rng, (d_model, j), dtype)),
        "joiner.pred_proj": Tensor(init_weight(rng, (embed_dim, j), dtype)),
        "joiner.out.w": Tensor(init_weight(rng, (j, vocab_size), dtype)),
        "joiner.out.b": Tensor(np.zeros(vocab_size, dtype=dtype)),
    }

def predictor_forward(
    params: Mapping[str, Tensor],
    tokens: Sequence[int],
    ) -> Tensor:
    """
    Label-side representation of every prefix of `tokens`.

    Row ``u`` is computed from the embeddings of tokens ``u-k .. u-1`` only,
    where ``k`` is the kernel width; row 0 is the start state.

    Parameters
    ----------
    params : mapping of str to Tensor
        Holds the ``predictor.*`` tensors.
    tokens : sequence of int
        Non-blank token ids, length U.

    Returns
    -------
    Tensor
        ``[U + 1, embed_dim]`` predictor outputs.

    Raises
    ------
    ValueError
        If `tokens` contains the blank id.
    """
    tokens = [int(t) for t in tokens]
    if BLANK_ID in tokens:
        raise ValueError("predictor input cannot contain blank.")
    table = params["predictor.embed"]
    start = Tensor(np.zeros((1, table.shape[1]), dtype=table.dtype))
    x = start if not tokens else nx.concat([start, nx.embedding(table, tokens)], axis=0)
    conv = nx.conv1d(x, params["predictor.conv"]) + params["predictor.conv_bias"]
    return nx.relu(conv)

def predictor_context_row(
    params: Mapping[str, Tensor],
    context: Sequence[int],
    ) -> np.ndarray:
    """
    Predictor output after `context`, the last (at most kernel width) tokens.

    Equal to the last row of `predictor_forward` over any token sequence
    ending in `context`.
    """
    k = params["predictor.conv"].shape[0]
    return predictor_forward(params, list(context)[-k:]).data[-1]

def joiner(
    params: Mapping[str, Tensor],
    enc: Tensor,
    pred: Tensor,
    ) -> Tensor:
    """
    Transducer lattice logits.

    ``logits[t, u] = tanh(enc[t] @ P_e + pred[u] @ P_p) @ W + b``.

    Returns
    -------
    Tensor
        ``[T, U + 1, V]`` logits.
    """
    a = enc @ params["joiner.enc_proj"]
    b = pred @ params["joiner.pred_proj"]
    hidden = nx.tanh(nx.outer_add(a, b))
    return hidden @ params["joiner.out.w"] + params["joiner.out.b"]

def joiner_step(
    params: Mapping[str, Tensor],
    enc_t: np.ndarray,
    pred_u: np.ndarray,
    ) -> np.ndarray:
    """Logits of a single lattice node, without recording anything."""
    hidden = np.tanh(
        enc_t @ params["joiner.enc_proj"].data + pred_u @ params["joiner.pred_proj"].data
        )
    return hidden @ params["joiner.out.w"].data + params["joiner.out.b"].data

def _lattice_log_probs(logits: np.ndarray, target: Sequence[int]):
    lp = special.log_softmax(logits.astype(np.float64), axis=-1)
    n_frames, n_nodes, _ = lp.shape
    n_labels = n_nodes - 1
    lp_blank = lp[:, :, BLANK_ID]
    # label log-probs at (t, u) for y[u]; padded with -inf at u = U
    lp_label = np.full((n_frames, n_nodes), -np.inf)
    if n_labels:
        lp_label[:, :n_labels] = lp[:, np.arange(n_labels), np.asarray(target)]
    return lp, lp_blank, lp_label

def _check_lattice(logits: np.ndarray, target: Sequence[int]) -> None:
    if logits.ndim != 3:
        raise ShapeError(f"expected [T, U+1, V] logits, got shape {logits.shape}")
    if logits.shape[0] == 0:
        raise ValueError("transducer loss needs at least one frame.")
    if logits.shape[1] != len(target) + 1:
        raise ShapeError(
            f"lattice has {logits.shape[1]} label nodes for a target of {len(target)} tokens"
            )
    v = logits.shape[2]
    if any(t == BLANK_ID or not 0 < t < v for t in target):
        raise ValueError(f"target tokens must lie in [1, {v}).")
    if not np.isfinite(logits).all():
        raise NonFiniteError("transducer logits hold NaN or Inf")

def _diagonals(n_frames: int, n_nodes: int):
    for d in range(n_frames + n_nodes - 1):
        t = np.arange(max(0, d - n_nodes + 1), min(d, n_frames - 1) + 1)
        yield t, d - t

def rnnt_loss(
    logits: Tensor | np.ndarray,
    target: Sequence[int],
    ) -> tuple[float, np.ndarray]:
    """
    Exact transducer negative log-likelihood and its gradient.

    Forward and backward variables are accumulated in log space along the
    anti-diagonals of the lattice, in float64 whatever the input dtype.

    Parameters
    ----------
    logits : Tensor or np.ndarray
        ``[T, U + 1, V]`` joiner outputs.
    target : sequence of int
        Reference tokens, length U, none of them blank.

    Returns
    -------
    nll : float
        ``-log P(target | logits)``.
    grad : np.ndarray
        Gradient of `nll` with respect to `logits`, in the logits dtype.

    Raises
    ------
    NonFiniteError
        If any logit is NaN or Inf.
    ShapeError
        If the lattice does not fit the target.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    target = [int(t) for t in target]
    _check_lattice(arr, target)
    lp, lp_blank, lp_label = _lattice_log_probs(arr, target)
    n_frames, n_nodes = lp_blank.shape
    last_t, last_u = n_frames - 1, n_nodes - 1

    alpha = np.full((n_frames, n_nodes), -np.inf)
    alpha[0, 0] = 0.0
    for t, u in _diagonals(n_frames, n_nodes):
        if t.size == 1 and t[0] == 0 and u[0] == 0:
            continue
        from_blank = np.where(
            t > 0, alpha[np.maximum(t - 1, 0), u] + lp_blank[np.maximum(t - 1, 0), u], -np.inf
            )
        from_label = np.where(
            u > 0, alpha[t, np.maximum(u - 1, 0)] + lp_label[t, np.maximum(u - 1, 0)], -np.inf
            )
        alpha[t, u] = np.logaddexp(from_blank, from_label)

    # beta[t, u]: log-probability of finishing from node (t, u)
    beta = np.full((n_frames, n_nodes), -np.inf)
    for t, u in reversed(list(_diagonals(n_frames, n_nodes))):
        is_end = (t == last_t) & (u == last_u)
        blank_next = np.where(
            t < last_t, beta[np.minimum(t + 1, last_t), u], np.where(is_end, 0.0, -np.inf)
            )
        label_next = np.where(u < last_u, beta[t, np.minimum(u + 1, last_u)], -np.inf)
        beta[t, u] = np.logaddexp(lp_blank[t, u] + blank_next, lp_label[t, u] + label_next)

    log_z = beta[0, 0]
    nll = -float(log_z)

    ts = np.arange(n_frames)[:, None]
    us = np.arange(n_nodes)[None, :]
    beta_down = np.full((n_frames, n_nodes), -np.inf)
    beta_down[:-1] = beta[1:]
    beta_down[last_t, last_u] = 0.0
    beta_right = np.full((n_frames, n_nodes), -np.inf)
    beta_right[:, :-1] = beta[:, 1:]

    grad_lp = np.zeros_like(lp)
    grad_lp[:, :, BLANK_ID] = -np.exp(alpha + lp_blank + beta_down - log_z)
    if last_u:
        g_label = -np.exp(alpha + lp_label + beta_right - log_z)
        grad_lp[ts, us[:, :last_u], np.asarray(target)[None, :]] = g_label[:, :last_u]
    grad = grad_lp - np.exp(lp) * grad_lp.sum(axis=-1, keepdims=True)
    return nll, grad.astype(arr.dtype)

def rnnt_nll(logits: Tensor, target: Sequence[int]) -> Tensor:
    """`rnnt_loss` as a scalar tape primitive."""
    target = [int(t) for t in target]
    cache = {}

    def forward(x):
        nll, grad = rnnt_loss(x, target)
        cache["grad"] = grad
        return np.asarray(nll)

    return nx.apply_op(
        "rnnt_nll", forward, [logits],
        lambda g, out, x: (g * cache["grad"],),
        )

def count_alignments(n_frames: int, n_labels: int) -> int:
    """Number of monotonic alignments of `n_labels` tokens to `n_frames` frames."""
    if n_frames < 1:
        return 0
    return math.comb(n_frames + n_labels - 1, n_labels)

def enumerate_alignments(n_frames: int, n_labels: int) -> Iterator[tuple[bool, ...]]:
    """
    Every valid emission order as a tuple of flags, True for a label.

    Sequences hold `n_frames` blanks and `n_labels` labels, and end in a
    blank that closes the last frame.
    """
    length = n_frames + n_labels
    for positions in itertools.combinations(range(length), n_labels):
        if length - 1 in positions:
            continue
        chosen = set(positions)
        yield tuple(i in chosen for i in range(length))

def rnnt_loss_bruteforce(
    logits: Tensor | np.ndarray,
    target: Sequence[int],
    ) -> float:
    """
    Transducer negative log-likelihood by explicit path enumeration.

    Raises
    ------
    ValueError
        If the instance exceeds 8 frames or 6 labels.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    target = [int(t) for t in target]
    _check_lattice(arr, target)
    n_frames, n_labels = arr.shape[0], len(target)
    if n_frames > BRUTEFORCE_MAX_FRAMES or n_labels > BRUTEFORCE_MAX_LABELS:
        raise ValueError(
            f"instance too large for enumeration (T={n_frames}, U={n_labels})."
            )
    lp = special.log_softmax(arr.astype(np.float64), axis=-1)
    scores = []
    for path in enumerate_alignments(n_frames, n_labels):
        t = u = 0
        score = 0.0
        for is_label in path:
            if is_label:
                score += lp[t, u, target[u]]
                u += 1
            else:
                score += lp[t, u, BLANK_ID]
                t += 1
        scores.append(score)
    return -float(special.logsumexp(scores))
