import numpy as np
import pytest


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Small shared corpus with noisy variants and all eval splits."""
    from mckws.datagen import CorpusSpec, build_corpus

    out = tmp_path_factory.mktemp("mini_corpus")
    spec = CorpusSpec(keywords=12, fillers=12, seed=77, noisy_frac=1.0,
                      filler_duration_s=(1.0, 1.4), eval_frac=0.25,
                      valid_frac=0.2)
    return build_corpus(spec, out)


@pytest.fixture(scope="session")
def mini_checkpoint(mini_corpus, tmp_path_factory):
    """One-epoch attention checkpoint over the shared corpus (tiny model)."""
    from mckws.model import ModelConfig
    from mckws.training import TrainConfig, train

    path = tmp_path_factory.mktemp("ckpt") / "attention.ckpt"
    config = TrainConfig(mode="attention", epochs=1, batch_size=4, seed=3)
    model_config = ModelConfig(channels=6, n_mels=40, att_proj=8, hidden=8,
                               n_map_heads=0, dropout_keep=0.9)
    train(config, mini_corpus["train"], mini_corpus["valid"],
          model_config=model_config, checkpoint_path=path)
    return path


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise.

    f takes an ndarray shaped like x and returns a float. Independent of
    any backprop machinery by construction.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grads_close(backprop: np.ndarray, fd: np.ndarray, rtol: float = 1e-4,
                       atol: float = 1e-8, label: str = ""):
    """|a-b| <= atol + rtol*max(|a|,|b|), elementwise; atol covers FD noise."""
    backprop = np.asarray(backprop)
    fd = np.asarray(fd)
    err = np.abs(backprop - fd)
    bound = atol + rtol * np.maximum(np.abs(backprop), np.abs(fd))
    worst = np.max(err - bound)
    assert np.all(err <= bound), (
        f"gradient mismatch{' for ' + label if label else ''}: "
        f"max excess {worst:.3e}, max abs err {err.max():.3e}"
    )
