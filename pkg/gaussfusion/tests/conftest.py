"""
Pytest Configuration and Shared Fixtures

Common fixtures for every test suite: the micro configuration, seeded random
generators, random Gaussian sets and small synthetic scenes.
"""

import numpy as np
import pytest

from gaussfusion.core.config import Config
from gaussfusion.core.tensor import set_default_dtype
from gaussfusion.render.renderer import RasterConfig
from gaussfusion.scene.gaussians import GaussianSet, SceneBounds
from gaussfusion.tools.synth import SceneSettings, generate_scene


# ============================================================================
# Pytest Configuration
# ============================================================================

def pytest_configure(config):
    """Configure pytest with custom markers and settings."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests"
    )
    config.addinivalue_line(
        "markers", "e2e: marks tests as end-to-end tests"
    )
    config.addinivalue_line(
        "markers", "performance: marks tests as performance tests"
    )
    config.addinivalue_line(
        "markers", "gradcheck: marks finite-difference gradient suites"
    )


@pytest.fixture(autouse=True)
def float64_precision():
    """Every test starts (and ends) at float64."""
    set_default_dtype('float64')
    yield
    set_default_dtype('float64')


# ============================================================================
# Configuration Fixtures
# ============================================================================

@pytest.fixture(scope="session")
def micro_config():
    """The micro preset: P=4, d=8, 8x8 raster, k=3, T=4."""
    return Config.preset('micro')


@pytest.fixture(scope="session")
def small_bounds():
    return SceneBounds(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0)


@pytest.fixture(scope="session")
def small_raster(small_bounds):
    """16x16 raster of 1 m pixels over ``small_bounds``."""
    return RasterConfig.from_bounds(small_bounds, 16, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ============================================================================
# Gaussian Fixtures
# ============================================================================

def make_random_set(rng, count, classes=3, dim=4, low=-6.0, high=6.0,
                    scale_range=(0.4, 2.0), normalized=True):
    """Random valid GaussianSet of constant arrays."""
    angles = rng.uniform(-np.pi, np.pi, count)
    rotations = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if not normalized:
        rotations = rotations * rng.uniform(0.5, 2.0, size=(count, 1))
    return GaussianSet(
        means=rng.uniform(low, high, size=(count, 2)),
        scales=rng.uniform(*scale_range, size=(count, 2)),
        rotations=rotations,
        logits=rng.normal(size=(count, classes)),
        priors=rng.uniform(0.1, 0.95, size=count),
        f_exp=rng.normal(size=(count, dim)),
        f_imp=rng.normal(size=(count, dim)),
    )


@pytest.fixture
def random_set(rng):
    """Factory: ``random_set(count, **kwargs)``."""
    def factory(count, **kwargs):
        return make_random_set(rng, count, **kwargs)
    return factory


# ============================================================================
# Scene Fixtures
# ============================================================================

@pytest.fixture(scope="session")
def micro_scene(micro_config):
    """One deterministic synthetic scene at the micro configuration."""
    return generate_scene(np.random.default_rng(7), SceneBounds.from_config(micro_config), 'normal',
                          SceneSettings.from_config(micro_config))


@pytest.fixture(scope="session")
def micro_scenes(micro_config):
    """Three deterministic micro scenes with traffic."""
    bounds = SceneBounds.from_config(micro_config)
    settings = SceneSettings.from_config(micro_config)
    return [generate_scene(np.random.default_rng(seed), bounds, 'easy', settings) for seed in (11, 12, 13)]


# ============================================================================
# Loop References
# ============================================================================

class LoopAttention:
    """Row-by-row, head-by-head numpy references for the attention blocks."""

    @staticmethod
    def layer_norm(x, norm, eps=1e-5):
        centered = x - x.mean()
        return centered / np.sqrt((centered ** 2).mean() + eps) * norm.gain.values + norm.bias.values

    @staticmethod
    def mlp(x, mlp):
        for layer in mlp.layers:
            x = x @ layer.w.values + (0.0 if layer.b is None else layer.b.values)
            if layer.act == 'relu':
                x = np.maximum(x, 0.0)
        return x

    @classmethod
    def feed_forward(cls, x, ffn):
        return x + cls.mlp(cls.layer_norm(x, ffn.norm), ffn.mlp)

    @staticmethod
    def attention(attn, q_in, k_in, v_in):
        """(update (n_q, d), weights (heads, n_q, n_k)) of MultiHeadAttention."""
        def project(dense, x):
            return x @ dense.w.values + dense.b.values

        n_q, n_k, heads = len(q_in), len(k_in), attn.heads
        dim = attn.q_proj.w.shape[1]
        dh = dim // heads
        update = np.zeros((n_q, dim))
        weights = np.zeros((heads, n_q, n_k))
        for i in range(n_q):
            q = project(attn.q_proj, q_in[i])
            merged = np.zeros(dim)
            for h in range(heads):
                cols = slice(h * dh, (h + 1) * dh)
                scores = np.array([q[cols] @ project(attn.k_proj, k_in[j])[cols] / np.sqrt(dh)
                                   for j in range(n_k)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                weights[h, i] = w
                for j in range(n_k):
                    merged[cols] += w[j] * project(attn.v_proj, v_in[j])[cols]
            update[i] = project(attn.o_proj, merged)
        return update, weights

    @classmethod
    def cross(cls, block, query, keys, values=None, query_pos=None, key_pos=None):
        """(output, update, weights) of CrossAttentionBlock."""
        q_in = np.array([cls.layer_norm(row, block.norm) for row in query])
        if query_pos is not None:
            q_in = q_in + query_pos
        k_in = keys if key_pos is None else keys + key_pos
        update, weights = cls.attention(block.attn, q_in, k_in, keys if values is None else values)
        out = np.array([cls.feed_forward(row, block.ffn) for row in query + update])
        return out, update, weights

    @classmethod
    def self_attention(cls, block, x, pos=None):
        """(output, update, weights) of SelfAttentionBlock."""
        normed = np.array([cls.layer_norm(row, block.norm) for row in x])
        qk = normed if pos is None else normed + pos
        update, weights = cls.attention(block.attn, qk, qk, normed)
        out = np.array([cls.feed_forward(row, block.ffn) for row in x + update])
        return out, update, weights


@pytest.fixture(scope="session")
def loop_attention():
    return LoopAttention
