import numpy as np
import pytest


def random_spd(rng, n, cond=None):
    """Random SPD matrix, optionally with a prescribed condition number."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    if cond is None:
        w = rng.uniform(0.1, 10.0, n)
    else:
        w = np.exp(rng.uniform(0, np.log(cond), n))
        w[0], w[-1] = 1.0, cond
    return (Q * w) @ Q.T


def random_sym(rng, n, scale=1.0):
    A = rng.standard_normal((n, n)) * scale
    return 0.5 * (A + A.T)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def spectrum_spd(rng, values):
    """SPD matrix with the given eigenvalues in a random basis."""
    n = len(values)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.asarray(values, dtype=np.float64)) @ Q.T


def fd_gradient_errors(model, S, labels, keys=("W", "dense_W", "dense_b")):
    """Relative error ``||fd - analytic|| / ||analytic||`` per parameter tensor.

    Central differences with step ``1e-6 (1 + |w|)`` on the mean cross-entropy.
    """
    from spdnet_psi.network import softmax_xent

    def loss(m):
        logits, _ = m.forward(S)
        return softmax_xent(logits, labels)[0]

    _, grads, _ = model.loss_and_grads(S, labels)
    errors = {}
    for key in keys:
        P = getattr(model, key)
        fd = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            h = 1e-6 * (1 + abs(P[idx]))
            old = P[idx]
            P[idx] = old + h
            up = loss(model)
            P[idx] = old - h
            down = loss(model)
            P[idx] = old
            fd[idx] = (up - down) / (2 * h)
        errors[key] = np.linalg.norm(fd - grads[key]) / max(np.linalg.norm(grads[key]), 1e-300)
    return errors
