"""Central finite differences, kept independent of autograd."""
import torch


def central_diff(f, inputs, step=1e-5):
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat, gflat = x.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(f(*inputs))
            flat[i] = orig - step
            down = float(f(*inputs))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def analytic(f, inputs):
    inputs = [x.detach().requires_grad_() for x in inputs]
    return list(torch.autograd.grad(f(*inputs), inputs)), inputs


def max_rel_error(f, inputs, step=1e-5):
    """Largest per-input relative error ||g_auto - g_fd|| / ||g_fd||."""
    g_auto, inputs = analytic(f, inputs)
    with torch.no_grad():
        g_fd = central_diff(f, [x.detach() for x in inputs], step)
    errs = []
    for a, n in zip(g_auto, g_fd):
        errs.append(float((a - n).norm() / n.norm().clamp(min=1e-12)))
    return max(errs), errs
