"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np
import torch


def fd_grad(fn, tensor, index_list, eps=1e-6):
    """Estimate d fn() / d tensor[idx] by central differences at the given flat indices."""
    flat = tensor.data.view(-1)
    out = []
    for i in index_list:
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = float(fn())
        flat[i] = orig - eps
        minus = float(fn())
        flat[i] = orig
        out.append((plus - minus) / (2 * eps))
    return np.array(out)


def pick(tensor, k, seed=0):
    n = tensor.numel()
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n, size=min(k, n), replace=False).tolist())


def rel_error(analytic, numeric, floor=1e-5):
    # the floor keeps structurally zero gradients (e.g. attention key biases) from dividing FD noise by ~0
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_param_grads(loss_fn, named_params, k=12, eps=1e-6, seed=0):
    """Return {name: relative error} between autograd and finite differences."""
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    with torch.no_grad():
        for j, (name, p) in enumerate(named_params):
            idx = pick(p, k, seed + j)
            analytic = p.grad.view(-1)[idx].numpy() if p.grad is not None else np.zeros(len(idx))
            numeric = fd_grad(loss_fn, p, idx, eps)
            errors[name] = rel_error(analytic, numeric)
    return errors
