import numpy as np
import pytest

from vitexplain.container import save_bundle
from vitexplain.imageio import write_ppm
from vitexplain.model import ModelBundle, ModelConfig, expected_shapes

# Frozen DeiT-Tiny-architecture fixture: scale chosen so logits are
# data-sensitive without saturating; seed 1 is the first draw whose
# perturbation behavior is non-degenerate (see test_acceptance).
DEIT_TINY_SEED = 1
DEIT_TINY_SCALE = 0.1


def make_config(**kwargs) -> ModelConfig:
    base = dict(
        image_size=2,
        patch_size=1,
        d_model=8,
        n_heads=2,
        n_blocks=2,
        d_ff=7,
        n_classes=4,
        layernorm_eps=1e-6,
    )
    base.update(kwargs)
    return ModelConfig(**base)


def random_weights(config: ModelConfig, rng: np.random.Generator, scale: float = 0.5):
    weights = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith((".g",)):
            weights[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith((".b", ".b1", ".b2")) or ".attn.b" in name or name == "patch_embed.b":
            weights[name] = 0.1 * rng.standard_normal(shape)
        else:
            weights[name] = scale * rng.standard_normal(shape)
    return weights


def make_bundle(config: ModelConfig, seed: int, scale: float = 0.5) -> ModelBundle:
    rng = np.random.default_rng(seed)
    return ModelBundle(config=config, weights=random_weights(config, rng, scale))


def random_tokens(n: int, d: int, rng: np.random.Generator, scale: float = 1.0):
    return scale * rng.standard_normal((n, d))


def deit_tiny_config() -> ModelConfig:
    return make_config(
        image_size=224, patch_size=16, d_model=192, n_heads=3,
        n_blocks=12, d_ff=768, n_classes=1000,
    )


def deit_tiny_bundle() -> ModelBundle:
    config = deit_tiny_config()
    rng = np.random.default_rng(DEIT_TINY_SEED)
    weights = {
        name: arr.astype(np.float32)
        for name, arr in random_weights(config, rng, DEIT_TINY_SCALE).items()
    }
    return ModelBundle(
        config=config,
        weights=weights,
        norm_mean=np.array([0.5, 0.5, 0.5]),
        norm_std=np.array([0.25, 0.25, 0.25]),
    )


def blob_image(r: np.random.Generator, size: int = 224) -> np.ndarray:
    """Random rectangular object on a dataset-mean background. Deleting
    background pixels under mean fill is a no-op, so deletion curves isolate
    how well a method ranks the object region."""
    img = np.full((size, size, 3), 0.5)
    side = int(r.integers(size * 2 // 7, size // 2 + 1))
    y = int(r.integers(0, size - side))
    x = int(r.integers(0, size - side))
    img[y : y + side, x : x + side] = r.random((side, side, 3))
    return img


@pytest.fixture(scope="session")
def deit_tiny_dir(tmp_path_factory):
    """DeiT-Tiny-shaped random bundle exported through the container pipeline,
    plus one fixture image on disk."""
    out = tmp_path_factory.mktemp("deit_tiny")
    bundle = deit_tiny_bundle()
    save_bundle(bundle, out / "model.bin", out / "model.json")
    write_ppm(out / "fixture.ppm", blob_image(np.random.default_rng(42)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
