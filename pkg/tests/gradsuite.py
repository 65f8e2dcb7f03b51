"""Finite-difference gradient cases shared by the unit and acceptance tests."""
import numpy as np

from voxgrasp import tensor as T
from voxgrasp.contrastive import HeadSpec, MemoryBank, contrastive_loss, extract_positive_embeddings, init_projection, project
from voxgrasp.network import ModelConfig, empower_transformer, forward_sites, init_params, insight_transformer
from voxgrasp.tensor import ParamStore, Tensor, numeric_grad, relative_error
from voxgrasp.training import SceneBatch, TrainConfig, grasp_loss, total_loss

EPS = 1e-5


def check(build, arrays, seed=0, max_positions=40):
    """Largest normwise relative error over the inputs of ``build``.

    Each input is probed at up to ``max_positions`` random entries; the output is
    reduced with a fixed random projection.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    proj = rng.normal(size=out.shape)
    T.total(T.mul(out, proj)).backward()

    def scalar(*arrs):
        return float(np.sum(build(*[Tensor(a) for a in arrs]).data * proj))

    worst = 0.0
    for i, leaf in enumerate(leaves):
        n = arrays[i].size
        pos = np.arange(n) if n <= max_positions else rng.choice(n, max_positions, replace=False)
        num = numeric_grad(scalar, arrays, i, EPS, pos).ravel()[pos]
        ana = (np.zeros(n) if leaf.grad is None else leaf.grad.ravel())[pos]
        worst = max(worst, relative_error(ana, num))
    return worst


def _r(rng, *shape):
    return rng.normal(size=shape)


def _params_of(store, prefix):
    names = [n for n in store.names() if n.startswith(prefix)]
    return names, [store.params[n] for n in names]


def op_cases():
    """``(name, build, arrays)`` for every differentiable operation and block."""
    rng = np.random.default_rng(0)
    r = lambda *s: _r(rng, *s)  # noqa: E731
    sites = np.array([[0, 0, 0], [3, 2, 1], [1, 1, 1], [3, 3, 3]])
    pts = rng.uniform(-0.5, 3.5, size=(7, 3))
    qgt = r(4, 5)
    qgt /= np.linalg.norm(qgt, axis=0)
    cases = [
        ("conv3 k3", lambda x, w, b: T.conv3(x, w, b), [r(2, 4, 4, 4), r(3, 2, 3, 3, 3), r(3)]),
        ("conv3 k3 stride2", lambda x, w, b: T.conv3(x, w, b, 2), [r(2, 4, 4, 4), r(3, 2, 3, 3, 3), r(3)]),
        ("conv3 k1", lambda x, w, b: T.conv3(x, w, b), [r(2, 4, 4, 4), r(3, 2, 1, 1, 1), r(3)]),
        ("conv3 k1 stride2", lambda x, w, b: T.conv3(x, w, b, 2), [r(2, 4, 4, 4), r(3, 2, 1, 1, 1), r(3)]),
        ("conv3 at sites", lambda x, w, b: T.conv3_at(x, w, b, sites), [r(2, 4, 4, 4), r(3, 2, 3, 3, 3), r(3)]),
        ("conv1 columns", T.conv1_cols, [r(3, 5), r(2, 3, 1, 1, 1), r(2)]),
        ("global_avg_pool", T.global_avg_pool, [r(3, 2, 3, 4)]),
        ("mlp2", T.mlp2, [r(8), r(2, 8), r(2), r(8, 2), r(8)]),
        ("softmax_rows", T.softmax_rows, [r(5, 5)]),
        ("upsample_x2", T.upsample_x2, [r(2, 3, 2, 4)]),
        ("trilinear points", lambda x: T.trilinear_points(x, pts), [r(2, 4, 4, 4)]),
        ("gather sites", lambda x: T.gather_sites(x, sites), [r(2, 4, 4, 4)]),
        ("take", lambda x: T.take(x, [0, 2, 2]), [r(2, 4)]),
        ("linear", T.linear, [r(3, 4), r(2, 4), r(2)]),
        ("concat", lambda a, b: T.concat([a, b]), [r(2, 3), r(1, 3)]),
        ("add/mul broadcast", lambda a, b: T.mul(T.add(a, b), b), [r(3, 4), r(1, 4)]),
        ("sigmoid", T.sigmoid, [r(6)]),
        ("relu", T.relu, [r(6)]),
        ("mixture attention", lambda q, v, p: T.mixture_attention(q, v, p, 2, block=3), [r(4, 7), r(3, 7), r(2)]),
        ("normalize quaternion", T.normalize_quat, [r(4, 3, 2)]),
        ("normalize rows", lambda x: T.normalize_rows(x)[0], [r(4, 5)]),
        ("bce loss", lambda z: T.bce_with_logits(z, [1, 0, 1, 0], [2, 1, 2, 1]), [r(4)]),
        ("rotation loss", lambda q: T.rotation_loss(q, qgt), [r(4, 5)]),
        ("squared error", lambda a: T.mean(T.square(a)), [r(5)]),
    ]
    cases += _block_cases(rng)
    return cases


def _block_cases(rng):
    cfg = ModelConfig(resolution=8, channels=(4, 4, 8), parts=2, mlp_ratio=2)
    store = init_params(cfg)
    cases = []
    for lvl, size in ((1, 8), (2, 4)):
        names, arrs = _params_of(store, f"it{lvl}.")

        def it_build(q, kv, *ps, names=names, lvl=lvl):
            return insight_transformer(dict(zip(names, ps)), f"it{lvl}", q, kv)

        cin = cfg.channels[lvl - 1]
        cases.append((f"insight block level {lvl}", it_build,
                      [_r(rng, 8, 2, 2, 2), _r(rng, cin, size, size, size)] + arrs))
    names, arrs = _params_of(store, "et.")
    cases.append(("empower block", lambda x, *ps, names=names: empower_transformer(dict(zip(names, ps)), x, 2, block=5),
                  [_r(rng, 8, 2, 2, 2)] + arrs))
    proj = ParamStore()
    init_projection(proj, HeadSpec(6, 5, 4))
    names, arrs = _params_of(proj, "proj.")
    cases.append(("projection head", lambda x, *ps, names=names: project(_Leaves(names, ps), x)[0], [_r(rng, 3, 6)] + arrs))
    bank = MemoryBank(8, 4, warmup=1)
    bank.push(_r(rng, 8, 4))
    cases.append(("contrastive loss", lambda z: contrastive_loss(T.normalize_rows(z)[0], bank)[0], [_r(rng, 5, 4)]))
    batch = SceneBatch(np.zeros((4, 3), int), np.zeros((4, 3)), np.array([1, 1, 0, 0]),
                       _unit_cols(rng, 4), np.array([0.02, 0.05, 0.0, 0.0]))
    from voxgrasp.network import HeadOutput

    def gl(q, r, w):
        return grasp_loss(HeadOutput(q, T.normalize_quat(r), w), batch, TrainConfig(), 0.08)[0]

    cases.append(("grasp loss", gl, [_r(rng, 4), _r(rng, 4, 4), _r(rng, 4) * 0.05]))
    cases.append(("total loss", lambda a, b: total_loss(T.mean(T.square(a)), T.mean(b)), [_r(rng, 3), _r(rng, 3)]))
    return cases


def _unit_cols(rng, n):
    q = rng.normal(size=(4, n))
    return q / np.linalg.norm(q, axis=0)


class _Leaves(dict):
    def __init__(self, names, tensors):
        super().__init__(zip(names, tensors))
        self.params = {n: t.data for n, t in self.items()}


def full_model_error(resolution=8, positions=2, seed=0):
    """Relative error of the toy network's full training loss gradient, probed per parameter."""
    cfg = ModelConfig.toy(resolution)
    store = init_params(cfg)
    init_projection(store, HeadSpec(sum(cfg.channels), 32, 32), cfg.seed)
    rng = np.random.default_rng(seed)
    vs = 0.4 / resolution
    tsdf = np.clip(rng.normal(scale=0.5, size=(resolution,) * 3), -1, 1)
    sites = rng.integers(0, resolution, size=(6, 3))
    positions_xyz = (sites + 0.5) * vs
    batch = SceneBatch(sites, positions_xyz, np.array([1, 1, 1, 0, 0, 0]), _unit_cols(rng, 6),
                       rng.uniform(0, 0.08, 6))
    bank = MemoryBank(16, 32, warmup=1)
    bank.push(rng.normal(size=(16, 32)))
    names = store.names()

    def loss_of(tensors):
        p = _Leaves(names, tensors)
        heads, pyr = forward_sites(p, tsdf, cfg, sites)
        lg, _ = grasp_loss(heads, batch, TrainConfig(), cfg.max_width)
        emb = extract_positive_embeddings(pyr.levels, positions_xyz[:3], vs)
        z, _ = project(p, emb)
        lc, _ = contrastive_loss(z, bank)
        return total_loss(lg, lc, 0.5)

    arrays = [store.params[n].copy() for n in names]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss_of(leaves).backward()
    ana, num = [], []
    for i, leaf in enumerate(leaves):
        pos = rng.choice(arrays[i].size, min(positions, arrays[i].size), replace=False)
        g = numeric_grad(lambda *arrs: loss_of([Tensor(a) for a in arrs]).item(), arrays, i, EPS, pos)
        num.append(g.ravel()[pos])
        ana.append((np.zeros(arrays[i].size) if leaf.grad is None else leaf.grad.ravel())[pos])
    return relative_error(np.concatenate(ana), np.concatenate(num))
