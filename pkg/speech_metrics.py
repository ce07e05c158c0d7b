"""
Error-rate metrics: word and character error rate from a Levenshtein
alignment, and relative error reduction between two systems.
"""
from typing import NamedTuple, Sequence

import numpy as np

from speech_agent_framework import SpeechMindError


class EvaluationError(SpeechMindError):
    code = "evaluation_error"
    input_error = True


class EditCounts(NamedTuple):
    substitutions: int
    insertions: int
    deletions: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


class ErrorRate(NamedTuple):
    """Error rate with the edit counts of one minimal alignment"""
    rate: float
    substitutions: int
    insertions: int
    deletions: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def align(reference: Sequence, hypothesis: Sequence) -> EditCounts:
    """
    Minimum edit alignment of two sequences.

    Returns:
        Substitution, insertion and deletion counts of one optimal alignment
        (insertions are hypothesis items with no reference counterpart)
    """
    n_ref, n_hyp = len(reference), len(hypothesis)
    costs = np.zeros((n_ref + 1, n_hyp + 1), dtype=np.int64)
    costs[:, 0] = np.arange(n_ref + 1)
    costs[0, :] = np.arange(n_hyp + 1)
    for i in range(1, n_ref + 1):
        for j in range(1, n_hyp + 1):
            substitution = costs[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            costs[i, j] = min(substitution, costs[i - 1, j] + 1, costs[i, j - 1] + 1)

    substitutions = insertions = deletions = 0
    i, j = n_ref, n_hyp
    while i > 0 or j > 0:
        if i > 0 and j > 0 and costs[i, j] == costs[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            substitutions += int(reference[i - 1] != hypothesis[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and costs[i, j] == costs[i - 1, j] + 1:
            deletions += 1
            i -= 1
        else:
            insertions += 1
            j -= 1
    return EditCounts(substitutions, insertions, deletions)


def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    return align(reference, hypothesis).distance


def _error_rate(reference: Sequence, hypothesis: Sequence) -> ErrorRate:
    counts = align(reference, hypothesis)
    return ErrorRate(counts.distance / max(1, len(reference)), *counts)


def word_error_rate(reference: str, hypothesis: str) -> ErrorRate:
    """
    (S + I + D) / number of reference words, on whitespace-split text.
    An empty reference counts as one word so insertions stay visible.
    """
    return _error_rate(reference.split(), hypothesis.split())


def character_error_rate(reference: str, hypothesis: str) -> ErrorRate:
    """Character-level error rate with spaces removed"""
    return _error_rate(list(reference.replace(" ", "")), list(hypothesis.replace(" ", "")))


def relative_error_reduction(baseline: float, new: float) -> float:
    """Percentage of the baseline error removed by the new system"""
    if baseline <= 0:
        raise EvaluationError("relative error reduction is undefined for a baseline of zero or less")
    return (baseline - new) / baseline * 100.0
