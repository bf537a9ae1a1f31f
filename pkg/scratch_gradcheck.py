"""Scratch finite-difference check of batch_forward_backward (not shipped)."""
import numpy as np

from kgeshard.model import BatchInputs, BatchGrads, ModelConfig, batch_forward_backward

rng = np.random.default_rng(0)


def make_inputs(cfg, B=4, N=6, F=5, with_mask=False, dropout=False, seed=1):
    r = np.random.default_rng(seed)
    d = cfg.embedding_dim
    k = cfg.relation_dim
    def arr(*shape):
        return r.normal(size=shape).astype(np.float64)
    inp = BatchInputs(
        head_shallow=arr(B, d),
        tail_shallow=arr(B, d),
        neg_shallow=arr(N, d),
        relations=arr(B, k),
        normals=arr(B, d) if cfg.uses_normals else None,
        head_features=arr(B, F) if F else None,
        tail_features=arr(B, F) if F else None,
        neg_features=arr(N, F) if F else None,
        proj_head=arr(cfg.embedding_dim, F) if F else None,
        proj_tail=arr(cfg.embedding_dim, F) if F else None,
        entity_count=50,
    )
    if dropout:
        inp.head_dropout = (r.random((B, d)) > 0.3).astype(np.float64)
        inp.tail_dropout = (r.random((B, d)) > 0.3).astype(np.float64)
        inp.neg_dropout = (r.random((N, d)) > 0.3).astype(np.float64)
    if with_mask:
        m = np.ones((B, N)); m[0, 0] = 0.0
        inp.negative_mask = m
    return inp


def fd_check(cfg, inp, eps=1e-4, tol=1e-5):
    res = batch_forward_backward(inp, cfg)
    fields = [
        ("head_shallow", "head_shallow"), ("tail_shallow", "tail_shallow"),
        ("neg_shallow", "neg_shallow"), ("relations", "relations"),
        ("normals", "normals"), ("proj_head", "proj_head"), ("proj_tail", "proj_tail"),
    ]
    worst = 0.0
    for in_name, g_name in fields:
        x = getattr(inp, in_name)
        g = getattr(res.grads, g_name)
        if x is None:
            continue
        fd = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = x[idx]
            x[idx] = orig + eps
            up = batch_forward_backward(inp, cfg).objective
            x[idx] = orig - eps
            dn = batch_forward_backward(inp, cfg).objective
            x[idx] = orig
            fd[idx] = (up - dn) / (2 * eps)
            it.iternext()
        scale = max(np.abs(fd).max(), np.abs(g).max(), 1e-8)
        err = np.abs(fd - g).max() / scale
        worst = max(worst, err)
        if err > tol:
            print(f"    FAIL {in_name}: rel err {err:.3e}")
    return worst


combos = []
for fn in ["transe", "transh", "rotate"]:
    for p in (1, 2):
        combos.append((fn, p))
combos += [("distmult", 1), ("complex", 1)]

for loss in ("log_sigmoid", "sampled_softmax_ce"):
    for fn, p in combos:
        margin = 0.0 if fn in ("distmult", "complex") else 1.0
        cfg = ModelConfig(
            score_fn=fn, distance_p=p, embedding_dim=8, feature_dim=5,
            margin=margin, adversarial_temperature=0.0, loss=loss,
            reg_embedding=0.05, reg_shallow=0.03, reg_feature=0.02,
        )
        inp = make_inputs(cfg, seed=hash((fn, p, loss)) % 2**31)
        err = fd_check(cfg, inp)
        status = "ok" if err <= 1e-5 else "FAIL"
        print(f"{loss:20s} {fn:9s} p={p}  max rel err {err:.3e}  {status}")
