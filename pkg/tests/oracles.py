"""Independent reference computations used to check the package.

Everything here is deliberately naive: python loops over elements, no shared
code paths with herdkit.
"""

import math

import numpy as np
import torch


def mse_oracle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total, count = 0.0, 0
    for row_a, row_b in zip(a.reshape(len(a), -1), b.reshape(len(b), -1)):
        for x, y in zip(row_a, row_b):
            total += (x - y) ** 2
            count += 1
    return total / count


def salient_oracle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    per_sample = []
    for row_a, row_b in zip(a.reshape(len(a), -1), b.reshape(len(b), -1)):
        per_sample.append(max((x - y) ** 2 for x, y in zip(row_a, row_b)))
    return sum(per_sample) / len(per_sample)


def cosine_oracle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = []
    for row_a, row_b in zip(a.reshape(len(a), -1), b.reshape(len(b), -1)):
        dot = sum(x * y for x, y in zip(row_a, row_b))
        na = math.sqrt(sum(x * x for x in row_a))
        nb = math.sqrt(sum(y * y for y in row_b))
        out.append(1.0 - dot / (max(na, 1e-12) * max(nb, 1e-12)))
    return sum(out) / len(out)


def knn_oracle(train_x, train_y, test_x, k):
    """Exhaustive search: sort every fit point by (distance, index), vote, break ties."""
    preds = []
    for q in test_x:
        dists = []
        for i, p in enumerate(train_x):
            d = math.sqrt(sum((float(u) - float(v)) ** 2 for u, v in zip(q, p)))
            dists.append((d, i))
        dists.sort()
        chosen = dists[:min(k, len(dists))]
        votes, sums = {}, {}
        for d, i in chosen:
            c = int(train_y[i])
            votes[c] = votes.get(c, 0) + 1
            sums[c] = sums.get(c, 0.0) + d
        best = max(votes.values())
        tied = sorted(c for c in votes if votes[c] == best)
        preds.append(min(tied, key=lambda c: (sums[c], c)))
    return preds


def macro_f1_oracle(preds, labels, num_classes):
    scores = []
    for c in range(num_classes):
        tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, labels) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return 100.0 * sum(scores) / num_classes


def simple_cnn_param_arithmetic():
    """Per-layer parameter count for 3x3 convs 3-64-128-256-256 with BatchNorm."""
    chans = [3, 64, 128, 256, 256]
    conv = sum(cin * cout * 9 + cout for cin, cout in zip(chans, chans[1:]))
    bn = sum(2 * c for c in chans[1:])
    return conv + bn


def central_difference(f, tensor, index, h):
    """Central finite difference of scalar ``f()`` w.r.t. ``tensor[index]``, in place."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = f().item()
        tensor[index] = orig - h
        down = f().item()
        tensor[index] = orig
    return (up - down) / (2 * h)


def state_bytes(model, optimizer=None):
    """Byte snapshot of parameters, buffers (running stats) and optimizer moments."""
    snap = {k: v.detach().cpu().numpy().tobytes() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for pid, st in optimizer.state_dict()["state"].items():
            for key, val in st.items():
                snap[f"opt.{pid}.{key}"] = (val.detach().cpu().numpy().tobytes()
                                            if torch.is_tensor(val) else repr(val).encode())
    return snap
