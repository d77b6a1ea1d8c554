import numpy as np

from plainseg.tensor import Tensor


def weighted_loss(out, seed=0):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# Structurally zero gradients: a key bias shifts every logit of a softmax row
# equally, and a conv bias directly before batch norm is removed by the mean.
# Relative FD error is meaningless there, so those are checked for ~0 instead.
ZERO_GRAD = ("k_proj.bias",)


def module_fd(module, fn, extra=(), skip=(), eps=None):
    """FD check over the parameters of ``module`` plus ``extra`` tensors.

    ``fn()`` recomputes the scalar loss from the current parameter values.
    """
    from plainseg.tensor import Tape, finite_difference_check

    skip = ZERO_GRAD + tuple(skip)
    named = list(module.named_parameters())
    checked = [p for n, p in named if not any(n.endswith(k) for k in skip)]
    zero = [p for n, p in named if any(n.endswith(k) for k in skip)]
    if zero:
        for p in zero:
            p.requires_grad = True
        with Tape() as tape:
            g = tape.backward(fn(), accumulate=False)
        worst = max(float(np.abs(g[p]).max()) if p in g else 0.0 for p in zero)
        assert worst < 1e-9, f"expected vanishing gradient, got {worst}"
    return finite_difference_check(lambda *_: fn(), checked + list(extra), eps)
