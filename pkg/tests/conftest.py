import numpy as np
import pytest

from diffguard import tensor as T
from diffguard.diffusion import Arch, DenoiserModel, make_schedule


class OracleModel:
    """Stand-in denoiser that returns a hand-written noise prediction.

    ``fn(x_t, t, cond, mask, masked_src) -> ndarray`` (all numpy); gradients
    flow only through ``masked_src`` when ``linear_in_src`` is given.
    """

    def __init__(self, fn, variant="inpaint", size=8, channels=1, sched=None):
        self.arch = Arch(image_size=size, channels=channels, base_width=8, variant=variant, groups=4)
        self.sched = sched or make_schedule(1000)
        self.fn = fn

    def eps(self, x_t, t, cond, mask=None, masked_src=None, *, params=None):
        x_t = T.tensor(x_t)
        B = x_t.shape[0]
        t = np.broadcast_to(t, (B,))
        out = self.fn(x_t.data, t, cond, None if mask is None else T.tensor(mask).data,
                      None if masked_src is None else T.tensor(masked_src).data)
        return T.tensor(np.asarray(out, x_t.data.dtype))

    __call__ = eps


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def tiny_standard():
    return DenoiserModel.init(Arch(image_size=16, base_width=8, groups=4), 3)


@pytest.fixture(scope="session")
def tiny_inpaint():
    """Random 16x16 inpaint model with a non-zero output layer."""
    from diffguard.selfcheck import random_model
    return random_model(11)
