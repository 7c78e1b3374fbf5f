"""CTC loss (log-space forward recursion), greedy decoding and CER.

Blank is reserved at index 0 throughout. The loss is pure torch and
differentiable through autograd, so gradient checks can run against
finite differences without a custom backward.
"""

from __future__ import annotations

import logging

import torch

logger = logging.getLogger(__name__)

BLANK = 0
NEG_INF = float("-inf")


class DecodeError(Exception):
    pass


def min_frames_required(reference: list[int]) -> int:
    """Shortest frame count that admits any valid alignment."""
    repeats = sum(1 for a, b in zip(reference, reference[1:]) if a == b)
    return len(reference) + repeats


def _masked_logsumexp(stacked: torch.Tensor) -> torch.Tensor:
    """logsumexp over dim 0 that backpropagates cleanly through -inf entries.

    torch.logsumexp emits NaN gradients when every input is -inf (the
    softmax normalizer is 0/0); unreachable lattice states hit that case
    on every batch, so the recursion needs this guarded form.
    """
    m = stacked.amax(dim=0)
    finite = m > NEG_INF
    m_safe = torch.where(finite, m, torch.zeros_like(m))
    summed = torch.exp(stacked - m_safe).sum(dim=0)
    tiny = torch.finfo(stacked.dtype).tiny
    out = m_safe + torch.log(summed.clamp_min(tiny))
    return torch.where(finite, out, torch.full_like(out, NEG_INF))


def ctc_loss_batched(log_probs: torch.Tensor, references: list[list[int]],
                     input_lengths: list[int] | None = None) -> torch.Tensor:
    """Negative log path probability per batch element.

    log_probs: (B, T, V) log-normalized scores. Infeasible alignments yield
    +inf for that element.
    """
    if log_probs.dim() != 3:
        raise ValueError("log_probs must be (B, T, V)")
    B, T, V = log_probs.shape
    if input_lengths is None:
        input_lengths = [T] * B
    S_max = max(2 * len(r) + 1 for r in references)
    device = log_probs.device
    dtype = log_probs.dtype

    ext = torch.full((B, S_max), BLANK, dtype=torch.long, device=device)
    allow_skip = torch.zeros((B, S_max), dtype=torch.bool, device=device)
    s_lens = []
    for b, ref in enumerate(references):
        if any(t == BLANK for t in ref):
            raise ValueError("blank index must not appear in references")
        if any(not 0 <= t < V for t in ref):
            raise ValueError("reference token out of vocabulary range")
        s = 2 * len(ref) + 1
        s_lens.append(s)
        for i, tok in enumerate(ref):
            ext[b, 2 * i + 1] = tok
        # a skip s-2 -> s is legal when labels differ and s is a non-blank
        for i in range(1, len(ref)):
            if ref[i] != ref[i - 1]:
                allow_skip[b, 2 * i + 1] = True

    emit = log_probs.gather(2, ext.unsqueeze(1).expand(B, T, S_max))  # (B,T,S)

    alpha = torch.full((B, S_max), NEG_INF, dtype=dtype, device=device)
    alpha[:, 0] = emit[:, 0, 0]
    has_label = torch.tensor([s >= 2 for s in s_lens], device=device)
    alpha[has_label, 1] = emit[has_label, 0, 1]

    for t in range(1, T):
        stay = alpha
        prev1 = torch.cat([torch.full((B, 1), NEG_INF, dtype=dtype, device=device),
                           alpha[:, :-1]], dim=1)
        prev2 = torch.cat([torch.full((B, 2), NEG_INF, dtype=dtype, device=device),
                           alpha[:, :-2]], dim=1)
        prev2 = torch.where(allow_skip, prev2, torch.full_like(prev2, NEG_INF))
        merged = _masked_logsumexp(torch.stack([stay, prev1, prev2]))
        active = torch.tensor([t < L for L in input_lengths], device=device).unsqueeze(1)
        alpha = torch.where(active, merged + emit[:, t], alpha)

    losses = []
    for b in range(B):
        s = s_lens[b]
        ends = [alpha[b, s - 1]]
        if s >= 2:
            ends.append(alpha[b, s - 2])
        total = torch.logsumexp(torch.stack(ends), dim=0)
        if torch.isinf(total) and total < 0:
            logger.warning("infeasible CTC alignment: T=%d too short for reference of %d tokens",
                           input_lengths[b], len(references[b]))
            losses.append(torch.tensor(float("inf"), dtype=dtype, device=device))
        else:
            losses.append(-total)
    return torch.stack(losses)


def ctc_loss(log_probs: torch.Tensor, reference: list[int]) -> torch.Tensor:
    """Scalar CTC loss for a single (T, V) instance."""
    if log_probs.dim() != 2:
        raise ValueError("log_probs must be (T, V)")
    return ctc_loss_batched(log_probs.unsqueeze(0), [list(reference)])[0]


def greedy_ctc_decode(log_probs: torch.Tensor) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    if log_probs.dim() != 2:
        raise ValueError("log_probs must be (T, V)")
    best = log_probs.argmax(dim=1).tolist()
    out = []
    prev = None
    for tok in best:
        if tok != prev and tok != BLANK:
            out.append(tok)
        prev = tok
    return out


def levenshtein(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def cer(reference, hypothesis) -> float:
    """Edit distance over reference length."""
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise DecodeError("CER is undefined for an empty reference")
    return levenshtein(ref, hyp) / len(ref)
