"""Edge message storage shared by the graph builder, engine and analyzers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DEFAULT_RCOND, robust_inverse

MOMENT = "moment"
CANONICAL = "canonical"
BROADCAST = "broadcast"
FORMS = (MOMENT, CANONICAL, BROADCAST)


def is_canonical(form):
    return form in (CANONICAL, BROADCAST)


@dataclass
class MessageStore:
    """Messages on every (pairwise factor, variable) edge, both directions.

    ``*_vec`` holds means in moment form and information vectors in the
    canonical/broadcast forms; ``*_prec`` holds precisions in every form.
    """

    form: str
    v2f_vec: np.ndarray
    v2f_prec: np.ndarray
    f2v_vec: np.ndarray
    f2v_prec: np.ndarray

    def copy(self):
        return MessageStore(
            self.form,
            self.v2f_vec.copy(),
            self.v2f_prec.copy(),
            self.f2v_vec.copy(),
            self.f2v_prec.copy(),
        )

    def moments(self, rcond=DEFAULT_RCOND):
        """``(v2f_mean, v2f_prec, f2v_mean, f2v_prec)`` regardless of form."""
        if not is_canonical(self.form):
            return self.v2f_vec, self.v2f_prec, self.f2v_vec, self.f2v_prec
        return (
            _to_mean(self.v2f_prec, self.v2f_vec, rcond),
            self.v2f_prec,
            _to_mean(self.f2v_prec, self.f2v_vec, rcond),
            self.f2v_prec,
        )

    def as_form(self, form, rcond=DEFAULT_RCOND):
        if is_canonical(form) == is_canonical(self.form):
            out = self.copy()
            out.form = form
            return out
        if is_canonical(form):
            v2f = np.einsum("eij,ej->ei", self.v2f_prec, self.v2f_vec)
            f2v = np.einsum("eij,ej->ei", self.f2v_prec, self.f2v_vec)
        else:
            v2f = _to_mean(self.v2f_prec, self.v2f_vec, rcond)
            f2v = _to_mean(self.f2v_prec, self.f2v_vec, rcond)
        return MessageStore(form, v2f, self.v2f_prec.copy(), f2v, self.f2v_prec.copy())


def _to_mean(prec, eta, rcond):
    out = np.zeros_like(eta)
    nz = np.abs(prec).reshape(len(prec), -1).max(axis=1) > 0
    if np.any(nz):
        out[nz] = np.einsum("eij,ej->ei", robust_inverse(prec[nz], rcond), eta[nz])
    return out
