"""CTC branch: loss, forced alignment, prefix scoring, blank pruning.

The loss runs as a batched torch recursion so gradients flow through
autograd. Alignment and prefix scoring are inference-side quantities and
run in float64 numpy. All lattice math is log-space.

Alignment definition: gamma[u, t] is the posterior probability that the
lattice occupies non-blank state u at frame t given the label sequence.
The emission frame of label u is the earliest maximizer of gamma[u, :],
constrained to be >= the previous label's frame so the returned frames
are always non-decreasing.
"""

from __future__ import annotations

import numpy as np
import torch

NEG_INF = float("-inf")
# finite stand-in for log(0) inside the differentiable recursion: exp()
# underflows to exactly 0, and unlike -inf it cannot turn a logsumexp
# backward pass into NaN
LOG_ZERO = -1.0e30


class CTCError(ValueError):
    pass


class CTCLengthError(CTCError):
    """Label sequence cannot fit in the available frames."""


def min_frames(labels: list[int] | np.ndarray) -> int:
    """Minimum frames a CTC path needs: one per label plus one per repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _check_labels(labels, n_frames: int, blank: int, n_classes: int) -> None:
    labels = list(labels)
    if len(labels) < 1:
        raise CTCError("need at least one label")
    if any(not 0 <= v < n_classes or v == blank for v in labels):
        raise CTCError("labels must be non-blank class ids")
    need = min_frames(labels)
    if n_frames < need:
        raise CTCLengthError(
            f"label sequence needs >= {need} frames, got {n_frames}"
        )


def _extend(labels: list[int], blank: int) -> np.ndarray:
    """Interleave blanks: [b, y1, b, y2, ..., yU, b]."""
    z = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    z[1::2] = labels
    return z


# ---------------------------------------------------------------------------
# Differentiable batched loss
# ---------------------------------------------------------------------------


def ctc_loss_batch(
    log_probs: torch.Tensor,
    input_lengths: torch.Tensor,
    labels: torch.Tensor,
    label_lengths: torch.Tensor,
    blank: int,
) -> torch.Tensor:
    """Negative log marginal probability of each label sequence, shape (B,).

    `log_probs` is (B, T, C) with row-normalized frames; `labels` is (B, U_max)
    padded arbitrarily past each row's `label_lengths`. Raises CTCLengthError
    if any row cannot fit (callers filter first; infinite losses are never
    returned silently).
    """
    if log_probs.dim() != 3:
        raise CTCError(f"log_probs must be (B, T, C), got {tuple(log_probs.shape)}")
    B, T, C = log_probs.shape
    device, dtype = log_probs.device, log_probs.dtype
    input_lengths = torch.as_tensor(input_lengths, dtype=torch.long, device=device)
    label_lengths = torch.as_tensor(label_lengths, dtype=torch.long, device=device)

    for b in range(B):
        _check_labels(
            labels[b, : int(label_lengths[b])].tolist(), int(input_lengths[b]), blank, C
        )

    U_max = int(label_lengths.max())
    S = 2 * U_max + 1
    z = torch.full((B, S), blank, dtype=torch.long, device=device)
    z[:, 1::2] = labels[:, :U_max]
    steps = torch.arange(S, device=device).unsqueeze(0)
    z_len = 2 * label_lengths + 1
    valid_s = steps < z_len.unsqueeze(1)
    # skip transition s-2 -> s allowed only into a non-blank differing from z[s-2]
    allow_skip = torch.zeros((B, S), dtype=torch.bool, device=device)
    if S > 2:
        allow_skip[:, 2:] = (z[:, 2:] != blank) & (z[:, 2:] != z[:, :-2]) & valid_s[:, 2:]

    neg = torch.full((B, S), LOG_ZERO, dtype=dtype, device=device)
    lp_z0 = log_probs[:, 0, :].gather(1, z)
    alpha = neg.clone()
    alpha[:, 0] = lp_z0[:, 0]
    if S > 1:
        alpha[:, 1] = torch.where(z_len > 1, lp_z0[:, 1], neg[:, 1])

    pad1 = torch.full((B, 1), LOG_ZERO, dtype=dtype, device=device)
    pad2 = torch.full((B, 2), LOG_ZERO, dtype=dtype, device=device)
    for t in range(1, T):
        a1 = torch.cat([pad1, alpha[:, :-1]], dim=1)
        a2 = torch.cat([pad2, alpha[:, :-2]], dim=1)
        a2 = torch.where(allow_skip, a2, neg)
        lp_t = log_probs[:, t, :].gather(1, z)
        new = torch.logsumexp(torch.stack([alpha, a1, a2], dim=0), dim=0) + lp_t
        new = torch.where(valid_s, new, neg)
        active = (t < input_lengths).unsqueeze(1)
        alpha = torch.where(active, new, alpha)

    idx_last = (z_len - 1).unsqueeze(1)
    idx_prev = torch.clamp(z_len - 2, min=0).unsqueeze(1)
    tail = torch.cat([alpha.gather(1, idx_last), alpha.gather(1, idx_prev)], dim=1)
    return -torch.logsumexp(tail, dim=1)


def ctc_loss(log_probs, labels: list[int], blank: int) -> torch.Tensor:
    """Single-utterance convenience wrapper; `log_probs` is (T, C)."""
    lp = torch.as_tensor(log_probs)
    if lp.dim() != 2:
        raise CTCError("log_probs must be (T, C)")
    T = lp.shape[0]
    lab = torch.as_tensor(list(labels), dtype=torch.long).unsqueeze(0)
    return ctc_loss_batch(
        lp.unsqueeze(0),
        torch.tensor([T]),
        lab,
        torch.tensor([lab.shape[1]]),
        blank,
    )[0]


# ---------------------------------------------------------------------------
# Forward-backward occupancy and alignment (float64 numpy, no grad)
# ---------------------------------------------------------------------------


def _logaddexp_inplace(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.logaddexp(a, b)


def _alpha_beta(lp: np.ndarray, z: np.ndarray, allow_skip: np.ndarray):
    T = lp.shape[0]
    S = z.shape[0]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, z[0]]
    if S > 1:
        alpha[0, 1] = lp[0, z[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _logaddexp_inplace(acc[1:], prev[:-1])
        skip = np.where(allow_skip[2:], prev[:-2], NEG_INF)
        acc[2:] = _logaddexp_inplace(acc[2:], skip)
        alpha[t] = acc + lp[t, z]

    # beta excludes the emission at t, so alpha + beta is the state posterior
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, z]
        acc = nxt.copy()
        acc[:-1] = _logaddexp_inplace(acc[:-1], nxt[1:])
        skip = np.where(allow_skip[2:], nxt[2:], NEG_INF)
        acc[:-2] = _logaddexp_inplace(acc[:-2], skip)
        beta[t] = acc
    return alpha, beta


def label_occupancy(log_probs, labels: list[int], blank: int):
    """Posterior occupancy gamma (U, T) and the total log-probability.

    gamma[u].sum() equals the expected number of frames label u occupies
    (at least 1; more when paths repeat the label across frames).
    """
    lp = np.asarray(
        log_probs.detach().cpu().numpy() if torch.is_tensor(log_probs) else log_probs,
        dtype=np.float64,
    )
    if lp.ndim != 2:
        raise CTCError("log_probs must be (T, C)")
    T, C = lp.shape
    labels = list(labels)
    _check_labels(labels, T, blank, C)
    z = _extend(labels, blank)
    allow_skip = np.zeros_like(z, dtype=bool)
    allow_skip[2:] = (z[2:] != blank) & (z[2:] != z[:-2])
    alpha, beta = _alpha_beta(lp, z, allow_skip)
    log_total = np.logaddexp(alpha[T - 1, -1], alpha[T - 1, -2] if len(z) > 1 else NEG_INF)
    post = alpha + beta - log_total
    gamma = np.exp(post[:, 1::2].T)  # (U, T), non-blank states only
    return gamma, float(log_total)


def forced_alignment(log_probs, labels: list[int], blank: int) -> np.ndarray:
    """Emission frame per label: earliest occupancy argmax, order-constrained.

    The order constraint (frame[u] >= frame[u-1]) matches the lattice
    topology; on non-degenerate posteriors it coincides with the plain
    per-label argmax.
    """
    gamma, _ = label_occupancy(log_probs, labels, blank)
    U, T = gamma.shape
    frames = np.zeros(U, dtype=np.int64)
    prev = 0
    for u in range(U):
        prev = prev + int(np.argmax(gamma[u, prev:]))
        frames[u] = prev
    return frames


def forced_alignment_batch(
    log_probs: torch.Tensor,
    input_lengths,
    labels,
    label_lengths,
    blank: int,
) -> list[np.ndarray]:
    """Per-utterance alignments from a padded (B, T, C) posterior batch."""
    lp = log_probs.detach().cpu().numpy()
    out = []
    for b in range(lp.shape[0]):
        T = int(input_lengths[b])
        U = int(label_lengths[b])
        lab = [int(v) for v in labels[b][:U]]
        out.append(forced_alignment(lp[b, :T], lab, blank))
    return out


# ---------------------------------------------------------------------------
# Prefix scoring for beam search
# ---------------------------------------------------------------------------


class PrefixState:
    """Incremental CTC prefix-scoring state for one hypothesis.

    `score` is the log-probability that the emitted sequence starts with
    the prefix; it never increases under extension. `last_emission_frame`
    is the frame maximizing the emission term of the most recent label
    (frame 0 for the empty prefix, feeding the first-step query rule).
    """

    __slots__ = ("tokens", "gamma_n", "gamma_b", "score", "last_emission_frame", "out_of_frames")

    def __init__(self, tokens, gamma_n, gamma_b, score, last_emission_frame, out_of_frames=False):
        self.tokens = tokens
        self.gamma_n = gamma_n
        self.gamma_b = gamma_b
        self.score = score
        self.last_emission_frame = last_emission_frame
        self.out_of_frames = out_of_frames


class CTCPrefixScorer:
    """Prefix scores over one utterance's CTC log-posteriors (T, C)."""

    def __init__(self, log_probs, blank: int):
        lp = np.asarray(
            log_probs.detach().cpu().numpy() if torch.is_tensor(log_probs) else log_probs,
            dtype=np.float64,
        )
        if lp.ndim != 2:
            raise CTCError("log_probs must be (T, C)")
        self.lp = lp
        self.T, self.C = lp.shape
        self.blank = blank
        if not 0 <= blank < self.C:
            raise CTCError("blank id outside posterior classes")

    def initial_state(self) -> PrefixState:
        gamma_n = np.full(self.T, NEG_INF)
        gamma_b = np.cumsum(self.lp[:, self.blank])
        return PrefixState((), gamma_n, gamma_b, 0.0, 0, False)

    def extend_all(self, state: PrefixState):
        """Score every non-blank extension of `state` at once.

        Returns (scores, t_emit, gamma_n, gamma_b), each indexed by the
        candidate token id in [0, C) with the blank row set to -inf.
        """
        T, C = self.T, self.C
        last = state.tokens[-1] if state.tokens else -1
        # phi[v, t]: log prob prefix is complete just before frame t and a
        # new segment of v may start at t.
        prev_any = np.logaddexp(state.gamma_b, state.gamma_n)
        phi = np.empty((C, T))
        phi[:, 1:] = prev_any[:-1]
        if last >= 0:
            phi[last, 1:] = state.gamma_b[:-1]
        phi[:, 0] = 0.0 if not state.tokens else NEG_INF

        emit = phi + self.lp.T  # (C, T) first-emission terms
        with np.errstate(divide="ignore"):
            scores = _logsumexp_rows(emit)
        scores[self.blank] = NEG_INF

        gamma_n = np.empty((C, T))
        gamma_n[:, 0] = emit[:, 0]
        lp_tok = self.lp.T  # (C, T)
        for t in range(1, T):
            gamma_n[:, t] = np.logaddexp(gamma_n[:, t - 1] + lp_tok[:, t], emit[:, t])
        gamma_b = np.empty((C, T))
        gamma_b[:, 0] = NEG_INF
        lp_blank = self.lp[:, self.blank]
        for t in range(1, T):
            gamma_b[:, t] = (
                np.logaddexp(gamma_b[:, t - 1], gamma_n[:, t - 1]) + lp_blank[t]
            )
        # the emission frame is where the new label's total emission term
        # gamma_n (first emission or continuation) peaks: the prefix-
        # conditioned analogue of the occupancy argmax used in training
        t_emit = np.argmax(gamma_n, axis=1)
        return scores, t_emit, gamma_n, gamma_b

    def extend(self, state: PrefixState, token: int) -> PrefixState:
        """Extend one prefix by `token` (the spec's single-step operation)."""
        if not 0 <= token < self.C or token == self.blank:
            raise CTCError("token must be a non-blank class id")
        scores, t_emit, gamma_n, gamma_b = self.extend_all(state)
        score = float(scores[token])
        return PrefixState(
            state.tokens + (token,),
            gamma_n[token],
            gamma_b[token],
            score,
            int(t_emit[token]),
            out_of_frames=not np.isfinite(score),
        )

    def final_score(self, state: PrefixState) -> float:
        """Log-probability of exactly the prefix; equals -ctc_loss of it."""
        if not state.tokens:
            return float(state.gamma_b[-1])
        return float(np.logaddexp(state.gamma_n[-1], state.gamma_b[-1]))


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    out = safe + np.log(np.exp(x - safe[:, None]).sum(axis=1))
    return np.where(np.isfinite(m), out, NEG_INF)


def prune_blank_frames(log_probs, threshold: float) -> np.ndarray:
    """Indices of frames whose blank posterior is <= threshold, in order.

    The blank is assumed to be the last class column.
    """
    if not 0.0 < threshold <= 1.0:
        raise CTCError("threshold must be in (0, 1]")
    lp = np.asarray(
        log_probs.detach().cpu().numpy() if torch.is_tensor(log_probs) else log_probs,
        dtype=np.float64,
    )
    blank_p = np.exp(lp[:, -1])
    return np.nonzero(blank_p <= threshold)[0]
