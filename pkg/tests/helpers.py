"""Reference implementations and builders shared by the unit and acceptance tests."""

import numpy as np

from mvp import numeric as nx
from mvp.pipeline import prompt_gradients
from mvp.prompts import init_prompts
from mvp.rpr import image_rng
from mvp.vit import ViTConfig, embed_patches, init_backbone


def reference_rpr(batch, alpha, seed):
    """Straightforward per-row, per-draw recombination with the same RNG stream.

    For every image in order: draw ``floor(m*alpha)`` distinct positions,
    then for each position draw one donor index and copy that single row.
    """
    out = [[row.copy() for row in image] for image in np.asarray(batch)]
    bs, m = len(out), len(out[0])
    r = int(np.floor(m * alpha))
    for i in range(bs):
        rng = image_rng(seed, i)
        positions = rng.choice(m, size=r, replace=False)
        for pos in positions:
            donor = int(rng.integers(0, bs))
            out[i][pos] = out[donor][pos].copy()
    return np.array(out)


def random_toy_config(rng):
    """Random geometry with 3 <= d <= 16, N <= 2, m <= 4.

    d = 2 is left out: layer norm then maps every row onto +-(1, -1) times
    the gain, the loss is flat and the gradient vanishes, so a relative
    error is undefined (see ``test_two_dim_features_have_flat_loss``).
    """
    d = int(rng.integers(3, 17))
    heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
    grid = [(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (1, 4), (4, 1), (3, 1)][rng.integers(8)]
    patch = int(rng.integers(1, 3))
    return ViTConfig(image_height=grid[0] * patch, image_width=grid[1] * patch,
                     patch_height=patch, patch_width=patch, embed_dim=d,
                     num_layers=int(rng.integers(1, 3)), num_heads=heads, mlp_ratio=2)


def toy_episode(cfg, rng, dtype=np.float64):
    """2- or 3-way, 1- or 2-shot episode of random patch embeddings."""
    way = int(rng.integers(2, 4))
    shot = int(rng.integers(1, 3))
    n_query = int(rng.integers(1, 3))
    weights = init_backbone(cfg, seed=int(rng.integers(1 << 30)), dtype=dtype)
    s_img = rng.random((way * shot, 3, cfg.image_height, cfg.image_width)).astype(dtype)
    q_img = rng.random((way * n_query, 3, cfg.image_height, cfg.image_width)).astype(dtype)
    return {
        "weights": weights,
        "s_emb": embed_patches(s_img, weights),
        "s_lab": np.repeat(np.arange(way), shot),
        "s_ids": rng.permutation(way * shot),
        "q_emb": embed_patches(q_img, weights),
        "q_lab": np.repeat(np.arange(way), n_query),
        "way": way,
    }


def episode_loss_fn(ep, bank, layer, weights=None):
    """Loss as a function of one prompt array, everything else fixed."""
    weights = ep["weights"] if weights is None else weights

    def f(x):
        prompts = list(bank.prompts)
        prompts[layer] = x
        loss, _, _ = prompt_gradients(ep["s_emb"].astype(x.dtype), ep["s_lab"], ep["s_ids"],
                                      ep["q_emb"].astype(x.dtype), ep["q_lab"],
                                      bank.with_prompts(prompts), weights, ep["way"])
        return loss
    return f


def gradient_check(seed, precision="double", h=2e-3):
    """Max relative error of tape gradients against central differences in float64.

    The oracle is Richardson-extrapolated central differences (steps ``h``
    and ``h/2``). With ``precision="single"`` the tape runs in float32 while
    the oracle still runs in float64 on the same weights.
    """
    rng = np.random.default_rng(seed)
    cfg = random_toy_config(rng)
    p = int(rng.integers(1, 3))
    ep = toy_episode(cfg, rng, np.float64)
    bank64 = init_prompts(cfg, p, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    if precision == "double":
        weights, bank = ep["weights"], bank64
    else:
        weights, bank = ep["weights"].astype(np.float32), bank64.astype(np.float32)
    _, grads, _ = prompt_gradients(ep["s_emb"].astype(bank.dtype), ep["s_lab"], ep["s_ids"],
                                   ep["q_emb"].astype(bank.dtype), ep["q_lab"], bank, weights,
                                   ep["way"])
    worst = 0.0
    for layer in range(cfg.num_layers):
        fd = nx.finite_difference_gradient(episode_loss_fn(ep, bank64, layer),
                                           bank64.prompts[layer], h=h, richardson=True)
        worst = max(worst, nx.max_relative_error(grads[layer], fd))
    return worst, cfg, p
