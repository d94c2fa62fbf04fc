import numpy as np
import pytest

from semsplat.geometry import Camera, GaussianSet, inverse_sigmoid, look_at_w2c


def random_scene(rng, n=50, feature_dim=4, sh_degree=0, spread=0.6,
                 opacity_range=(0.15, 0.85), scale_range=(0.02, 0.15)):
    k = (sh_degree + 1) ** 2
    return GaussianSet(
        positions=rng.normal(0, spread, (n, 3)),
        sh_coeffs=rng.normal(0, 0.3, (n, k, 3)),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity_range, n)),
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        rotations=rng.normal(0, 1, (n, 4)),
        features=rng.normal(0, 1, (n, feature_dim)),
    )


def fd_safe_scene(rng, n=7, feature_dim=3, sh_degree=3):
    """Scene tuned for finite-difference checks: moderate opacities (no
    alpha clamp, no early stop with <= 10 splats) and separated depths."""
    z = np.linspace(-0.6, 0.6, n) + rng.uniform(-0.02, 0.02, n)
    pos = np.stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), z], axis=1)
    k = (sh_degree + 1) ** 2
    return GaussianSet(
        positions=pos,
        sh_coeffs=rng.normal(0, 0.2, (n, k, 3)),
        opacity_logits=inverse_sigmoid(rng.uniform(0.25, 0.5, n)),
        log_scales=np.log(rng.uniform(0.25, 0.6, (n, 3))),
        rotations=rng.normal(0, 1, (n, 4)),
        features=rng.normal(0, 1, (n, feature_dim)),
    )


def small_camera(width=16, height=16, f=18.0, dist=2.5):
    return Camera(f, f, width / 2, height / 2, width, height,
                  look_at_w2c([0, 0, -dist], [0, 0, 0], [0, -1, 0]))


@pytest.fixture(scope="session")
def tiny_teacher():
    from semsplat.scenegen import make_teacher_scene

    return make_teacher_scene(0, num_classes=8, num_gaussians=2600)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_teacher):
    from semsplat.scenegen import make_dataset

    return make_dataset(tiny_teacher, width=48, height=48, n_test=4, seed_count=700)
