"""Independent reference computations used by the tests."""

import itertools

import numpy as np

from fairshift.neuralcore import CLASSIFIER, Network, forward


def random_net(rng, in_dim=None, n_adv=None, reversal=None):
    in_dim = in_dim or int(rng.integers(2, 7))
    enc = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 3)))]
    cls_hidden = [int(rng.integers(2, 6))] if rng.random() < 0.3 else []
    n_adv = int(rng.integers(0, 3)) if n_adv is None else n_adv
    advs = {}
    for k in range(n_adv):
        hidden = [int(rng.integers(2, 6))] if rng.random() < 0.7 else []
        advs[f"adv{k}"] = (hidden, int(rng.integers(1, 3)))
    rev = float(rng.uniform(0.2, 2.0)) if reversal is None else reversal
    net = Network.build(in_dim, enc, 2, seed=int(rng.integers(1 << 30)), classifier_hidden=cls_hidden, adversaries=advs, reversal=rev)
    # nudge biases so few units sit near a kink
    for p in net.parameters().values():
        p += rng.normal(0, 0.05, p.shape)
    return net


def straight_forward(net, x):
    """Re-evaluate every head with explicit per-unit loops."""

    def layer(h, W, b, relu):
        out = np.zeros((h.shape[0], W.shape[0]))
        for r in range(h.shape[0]):
            for o in range(W.shape[0]):
                s = b[o]
                for i in range(W.shape[1]):
                    s += W[o, i] * h[r, i]
                out[r, o] = max(s, 0.0) if relu else s
        return out

    h = x
    for L in net.encoder:
        h = layer(h, L.weights, L.bias, True)
    out = {}
    for name, layers in [(CLASSIFIER, net.classifier)] + list(net.adversaries.items()):
        z = h
        for j, L in enumerate(layers):
            z = layer(z, L.weights, L.bias, j < len(layers) - 1)
        out[name] = z
    return out


def _relu_pattern(net, x):
    _, cache = forward(net, x)
    pats = [p > 0 for p in cache.enc_pre]
    for name in sorted(cache.head_pre):
        pats += [p > 0 for p in cache.head_pre[name][:-1]]
    return pats


def gradcheck(net, x, head_grads, coords=100, h=1e-4, rng=None):
    """Compare ``backward`` against central differences of J_h = <G_h, out_h>.

    Head parameters follow plain derivatives; encoder parameters expect
    sum_h s_h dJ_h with s = 1 for the classifier and -coefficient for an
    adversary.  Coordinates whose perturbation flips a ReLU are skipped.
    Returns ``(max relative error, checked, skipped)``.
    """
    from fairshift.neuralcore import backward

    rng = rng or np.random.default_rng(0)
    _, cache = forward(net, x, heads=list(head_grads))
    grads = backward(net, cache, head_grads)
    params = net.parameters()
    names = sorted(params)
    base = _relu_pattern(net, x)

    def objective(head):
        out, _ = forward(net, x, heads=[head])
        return float(np.sum(out[head] * head_grads[head]))

    worst, checked, skipped = 0.0, 0, 0
    for _ in range(coords):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        orig = p[idx]
        kink = False
        fd = 0.0
        for head in head_grads:
            if not (name.startswith("encoder") or name.startswith(head + ".")):
                continue
            p[idx] = orig + h
            jp = objective(head)
            kink |= any((a != b).any() for a, b in zip(_relu_pattern(net, x), base))
            p[idx] = orig - h
            jm = objective(head)
            kink |= any((a != b).any() for a, b in zip(_relu_pattern(net, x), base))
            p[idx] = orig
            d = (jp - jm) / (2 * h)
            if name.startswith("encoder") and head != CLASSIFIER:
                d *= -net.reversal[head]
            fd += d
        if kink:
            skipped += 1
            continue
        got = grads.get(name, np.zeros_like(p))[idx]
        err = abs(got - fd) / max(abs(got) + abs(fd), 1e-7)
        worst = max(worst, err)
        checked += 1
    return worst, checked, skipped


def all_labelings(n):
    return [np.array(t, dtype=np.int64) for t in itertools.product((0, 1), repeat=n)]


def dominates(p, q):
    """(acc, dodds): p is no worse in both and strictly better in one."""
    return p[0] >= q[0] and p[1] <= q[1] and (p[0] > q[0] or p[1] < q[1])
