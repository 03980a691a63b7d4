"""Analytic gradients against central finite differences.

Every instance is drawn away from the loss's non-differentiable points (hinge
at zero, |x| at zero, the leaky rectifier at zero, the complex modulus at
zero) by at least ``KINK_GAP``; a step of ``EPS`` moves none of them across.
"""
import numpy as np
import pytest
import torch
import torch.nn.functional as F

from metalign.encoder import AlignmentEncoder, LEAKY_SLOPE, _directed, attention_logits, gcn_layer, highway
from metalign.features import FeatureBundle, FeatureMatrix
from metalign.graph import Kind, gene, metabolite
from metalign.linkpred import LinkPredModel, lp_loss

EPS = 1e-4
TOL = 1e-4
KINK_GAP = 1e-3
INSTANCES = 20


def numeric_grads(params, loss_fn):
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + EPS
                up = loss_fn().item()
                flat[i] = orig - EPS
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * EPS)
            out.append(g)
    return out


def check(params, names, loss_fn) -> set[str]:
    """Asserts the per-tensor relative error; returns the names actually compared.

    A tensor whose gradient is below 1e-6 of the instance's whole gradient is
    numerically zero (e.g. the attention target vector when every logit of a
    softmax has one sign) and its relative error would only measure round-off.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    assert loss.item() > 0, "instance has no active hinge terms"
    loss.backward()
    analytic = [p.grad.clone() for p in params]
    numeric = numeric_grads(params, loss_fn)
    total = torch.sqrt(sum((a * a).sum() for a in analytic)).item()
    compared = set()
    for name, a, n in zip(names, analytic, numeric):
        scale = max(a.norm().item(), n.norm().item())
        if scale < 1e-6 * total:
            continue
        rel = (a - n).norm().item() / scale
        assert rel < TOL, f"{name}: relative error {rel:.2e}"
        compared.add(name)
    return compared


# ------------------------------------------------------------------ alignment


def _micro_encoder(rng, use_features):
    n_a = int(rng.integers(2, 5))
    n = 2 * n_a
    dim = int(rng.integers(3, 7))
    vertices = [(gene if i % 2 else metabolite)("A" if i < n_a else "B", f"v{i}") for i in range(n)]
    fm = None
    if use_features:
        table = {
            v: FeatureBundle(rng.normal(size=2), rng.normal(size=2), rng.normal(size=5 if v.kind is Kind.GENE else 3))
            for v in vertices
        }
        fm = FeatureMatrix.stack(vertices, table)
    layers = int(rng.integers(1, 4))
    enc = AlignmentEncoder(n, dim, layers, fm, proj_dim=3, seed=int(rng.integers(1 << 30)))
    with torch.no_grad():
        # larger than the default init so the gate and attention do real work
        for p in enc.parameters():
            p.mul_(3.0)
    pairs = sorted({tuple(sorted(rng.choice(n, 2, replace=False).tolist())) for _ in range(n)})
    edges = torch.tensor(pairs, dtype=torch.int64)
    weight = torch.as_tensor(rng.uniform(0.2, 1.0, len(edges)))
    pos = torch.as_tensor(np.stack([np.arange(n_a), np.arange(n_a, n)], 1))
    neg = torch.as_tensor(rng.integers(0, n, (n_a, 3, 2)))
    return enc, edges, weight, pos, neg


def _align_kinks(enc, edges, weight, pos, neg, margin):
    with torch.no_grad():
        h = enc.initial()
        for w, gw, gb in zip(enc.gcn, enc.gate_w, enc.gate_b):
            h = highway(h, gcn_layer(h, edges, weight, w), gw, gb)
        src, dst, _ = _directed(edges, weight)
        e = attention_logits(h @ enc.att_weight.T, src, dst, enc.a_src, enc.a_dst)
        out = enc(edges, weight)
        dp = out[pos[:, 0]] - out[pos[:, 1]]
        dn = out[neg[..., 0]] - out[neg[..., 1]]
        hinge = dp.abs().sum(-1)[:, None] - dn.abs().sum(-1) + margin
        # a negative equal to its own pair has dn == 0 identically: no kink is crossed
        dn_live = dn[(neg[..., 0] != neg[..., 1])]
        gaps = [e.abs().min(), dp.abs().min(), hinge.abs().min()]
        if dn_live.numel():
            gaps.append(dn_live.abs().min())
        return min(float(x) for x in gaps)


def _align_instances(use_features):
    rng = np.random.default_rng(101 if use_features else 202)
    found = 0
    while found < INSTANCES:
        enc, edges, weight, pos, neg = _micro_encoder(rng, use_features)
        margin = float(rng.uniform(0.5, 3.0))
        if _align_kinks(enc, edges, weight, pos, neg, margin) < KINK_GAP:
            continue
        loss_fn = lambda: F.relu(
            (lambda out: (out[pos[:, 0]] - out[pos[:, 1]]).abs().sum(-1)[:, None]
             - (out[neg[..., 0]] - out[neg[..., 1]]).abs().sum(-1) + margin)(enc(edges, weight))
        ).sum()
        with torch.no_grad():
            if loss_fn().item() == 0:
                continue
        found += 1
        yield enc, edges, weight, pos, neg, margin


@pytest.mark.parametrize("use_features", [True, False], ids=["fused-input", "free-embedding"])
def test_alignment_loss_gradients(use_features):
    from metalign.encoder import alignment_loss

    compared, seen = set(), set()
    for enc, edges, weight, pos, neg, margin in _align_instances(use_features):
        names, params = zip(*enc.named_parameters())
        seen |= {n.split(".")[0] + "." + n.split(".")[-1] if "." in n else n for n in names}
        compared |= {
            n.split(".")[0] + "." + n.split(".")[-1] if "." in n else n
            for n in check(list(params), names, lambda: alignment_loss(enc(edges, weight), pos, neg, margin))
        }
    expected = {"gcn.0", "gate_w.0", "gate_b.0", "att_weight", "a_src", "a_dst", "out_proj"}
    expected |= {"fusion.proj_smile", "fusion.proj_seq", "fusion.proj_shared"} if use_features else {"embedding"}
    assert expected <= seen
    assert compared == seen, f"never compared: {sorted(seen - compared)}"


# ------------------------------------------------------------ link prediction


def _lp_kinks(model, pos, neg, margin):
    with torch.no_grad():
        def parts(idx):
            m = model.vertex_emb[idx[..., 0]]
            r = model.relation_emb[idx[..., 1]]
            g = model.vertex_emb[idx[..., 2]]
            if model.variant == "transe":
                return (m + r - g).abs()
            if model.variant == "rotate":
                half = model.dim // 2
                cos, sin = torch.cos(r), torch.sin(r)
                re = m[..., :half] * cos - m[..., half:] * sin - g[..., :half]
                im = m[..., :half] * sin + m[..., half:] * cos - g[..., half:]
                return torch.sqrt(re * re + im * im)
            return None

        hinge = (model(pos)[:, None] - model(neg) + margin).abs().min()
        gaps = [hinge]
        for idx in (pos, neg):
            p = parts(idx)
            if p is not None:
                gaps.append(p.min())
        return min(float(x) for x in gaps)


@pytest.mark.parametrize("variant", ["transe", "rotate", "distmult"])
def test_link_prediction_loss_gradients(variant):
    rng = np.random.default_rng({"transe": 1, "rotate": 2, "distmult": 3}[variant])
    found = 0
    while found < INSTANCES:
        n = int(rng.integers(4, 9))
        dim = 2 * int(rng.integers(1, 4))
        model = LinkPredModel(n, dim, variant, seed=int(rng.integers(1 << 30)))
        with torch.no_grad():
            model.vertex_emb.mul_(3.0)
        pos = torch.as_tensor(np.stack([rng.integers(0, n, 3), rng.integers(0, 2, 3), rng.integers(0, n, 3)], 1))
        neg = pos[:, None, :].repeat(1, 4, 1).clone()
        side = torch.as_tensor(rng.integers(0, 2, (3, 4)) * 2)
        neg.scatter_(2, side[..., None], torch.as_tensor(rng.integers(0, n, (3, 4, 1))))
        margin = float(rng.uniform(0.2, 2.0))
        if _lp_kinks(model, pos, neg, margin) < KINK_GAP:
            continue
        with torch.no_grad():
            if lp_loss(model, pos, neg, margin).item() == 0:
                continue
        found += 1
        names, params = zip(*model.named_parameters())
        assert set(names) == {"vertex_emb", "relation_emb"}
        assert check(list(params), names, lambda: lp_loss(model, pos, neg, margin)) == set(names)
