"""Backend parity: the compiled kernels must match the pure numpy twin."""

import numpy as np
import pytest

import loralab.kernels as kernels
from loralab.kernels import pure
from loralab.rng import RngStream

compiled = pytest.importorskip(
    "loralab.kernels._qrcore", reason="compiled kernel extension not built"
)

SHAPES = [(4, 1), (5, 2), (8, 3), (16, 4), (64, 8), (32, 32)]


@pytest.mark.parametrize("shape", SHAPES)
def test_forward_parity(shape):
    a = RngStream(77).spawn(*shape).normal(shape)
    qp, rp, r1p, r2p, tp = pure.qr_forward(a, 1e-10)
    qc, rc, r1c, r2c, tc = compiled.qr_forward(a, 1e-10)
    assert np.allclose(qp, qc, atol=1e-13, rtol=0)
    assert np.allclose(rp, rc, atol=1e-12, rtol=1e-13)
    assert np.allclose(r1p, r1c, atol=1e-12, rtol=1e-13)
    assert np.allclose(r2p, r2c, atol=1e-12, rtol=1e-13)
    assert np.allclose(tp, tc, atol=1e-12, rtol=1e-13)


@pytest.mark.parametrize("shape", SHAPES)
def test_backward_parity(shape):
    stream = RngStream(78).spawn(*shape)
    a = stream.normal(shape)
    cot = stream.spawn(1).normal(shape)
    outp = pure.qr_backward(*pure.qr_forward(a, 1e-10), cot)
    outc = compiled.qr_backward(*compiled.qr_forward(a, 1e-10), cot)
    assert np.allclose(outp, outc, atol=1e-11, rtol=1e-11)


def test_both_raise_on_rank_deficiency():
    a = np.ones((4, 2))
    with pytest.raises(ZeroDivisionError):
        pure.qr_forward(a, 1e-10)
    with pytest.raises(ZeroDivisionError):
        compiled.qr_forward(a, 1e-10)


def test_active_backend_reports_name():
    assert kernels.backend() in ("compiled", "pure")


def test_pure_selected_by_env(monkeypatch):
    # The selector runs at import; simulate by calling the module logic again.
    import importlib

    monkeypatch.setenv("LORALAB_PURE_KERNELS", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.backend() == "pure"
    finally:
        monkeypatch.delenv("LORALAB_PURE_KERNELS")
        importlib.reload(kernels)
