import pytest

from volcap.synthetic import GenerationConfig, generate_triplets

TINY_MODEL = dict(n_enc=[2, 2, 4, 4, 4], n_dec=[4, 4, 4, 2, 2], embedding_dim=8,
                  grid=[8, 8, 8, 2])


def tiny_gen_cfg(**kw):
    base = dict(seeds=[0, 1], n_frames=25, fps=10.0, image_size=32, focal=38.0,
                grid_dims=(8, 8, 8), voxel_size=250.0, low_view_ids=None, low_view_count=[2, 4])
    base.update(kw)
    return GenerationConfig(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    """50 frames on an 8^3 grid: big enough to train on, small enough to be quick."""
    return generate_triplets(tiny_gen_cfg())
