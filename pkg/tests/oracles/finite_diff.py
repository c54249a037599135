"""Central finite differences over every parameter coordinate of a model.

Independent of autograd: each coordinate is perturbed by +-h and the loss is
re-evaluated with a plain forward pass. Perturbed copies are evaluated in
chunks with ``torch.func.vmap`` for speed.
"""
import copy

import torch
from torch.func import functional_call, replace_all_batch_norm_modules_, vmap


def _direct_bce(logits, targets):
    # direct textbook form, fine in float64 for moderate logits
    p = torch.sigmoid(logits)
    return -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p)).mean()


def finite_difference_grads(model, x, context, targets, h=1e-4, chunk=512):
    model = copy.deepcopy(model).train()
    # batch statistics only; running-stat buffers are irrelevant to the train-mode output
    replace_all_batch_norm_modules_(model)
    params = {k: v.detach() for k, v in model.named_parameters()}
    buffers = {k: v.detach() for k, v in model.named_buffers()}

    def loss_with(name, flat_delta):
        p = dict(params)
        p[name] = params[name] + flat_delta.reshape(params[name].shape)
        logits = functional_call(model, {**p, **buffers}, (x, context))
        return _direct_bce(logits, targets)

    grads = {}
    for name, value in params.items():
        n = value.numel()
        out = torch.empty(n, dtype=value.dtype)
        f = vmap(lambda d: loss_with(name, d))
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            eye = torch.zeros(stop - start, n, dtype=value.dtype)
            eye[torch.arange(stop - start), torch.arange(start, stop)] = h
            with torch.no_grad():
                out[start:stop] = (f(eye) - f(-eye)) / (2 * h)
        grads[name] = out.reshape(value.shape)
    return grads
