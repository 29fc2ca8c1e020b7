import numpy as np
import pytest

import sasenet.tensor as T
from sasenet import analysis, nn
from sasenet.arch import BlockSpec, build_bottleneck, build_resnet, resnet50_spec
from sasenet.attention import MHSA, MHSAConfig
from sasenet.cli import GRADCHECK_MODULES, build_named_module
from sasenet.tensor import Tensor, record_op


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


# ---------------------------------------------------------------------------
# count_params
# ---------------------------------------------------------------------------

def test_fc_param_count():
    fc = nn.Linear(64, 4, rng=np.random.default_rng(0))
    assert analysis.count_params(fc).total_params == 260


def test_conv_param_count():
    conv = nn.Conv2d(64, 64, 3, bias=True, rng=np.random.default_rng(0))
    assert analysis.count_params(conv).total_params == 36928


def test_param_entries_are_grouped_by_layer():
    block = build_bottleneck(BlockSpec(variant="sase", in_channels=16, channels=16,
                                       bottleneck_ratio=2, heads=2), seed=0)
    report = analysis.count_params(block)
    names = {e.name for e in report.entries}
    assert "core.k_conv1" in names and "conv1" in names
    assert report.total_params == sum(e.params for e in report.entries)
    assert report.total_params == block.param_count()


# ---------------------------------------------------------------------------
# count_flops
# ---------------------------------------------------------------------------

def test_conv_flops_closed_form():
    conv = nn.Conv2d(64, 64, 3, padding=1, bias=False, rng=np.random.default_rng(0))
    report = analysis.count_flops(conv, (64, 56, 56))
    assert report.total_flops == 64 * 64 * 9 * 56 * 56 == 115_605_504


def test_resnet50_flops_at_224():
    m = build_resnet(resnet50_spec("vanilla"), seed=0)
    total = analysis.count_flops(m, (3, 224, 224)).total_flops
    assert abs(total - 4.10e9) / 4.10e9 <= 0.03


def test_mhsa_symbolic_attention_terms():
    c, g, h, w = 16, 4, 5, 5
    m = MHSA(MHSAConfig(c, g), rng=np.random.default_rng(0))
    n, d = h * w, c // g
    # scores g*N^2*d + apply g*N^2*d, plus N^2 softmax and N^2 scale per head
    assert m.core_flops((c, h, w)) == g * (2 * n * n * d + 2 * n * n)
    report = analysis.count_flops(m, (c, h, w))
    assert report.total_flops == 3 * c * c * n + m.core_flops((c, h, w))


@pytest.mark.parametrize("name", GRADCHECK_MODULES)
def test_analytic_equals_instrumented_counter(name):
    module, shapes = build_named_module(name, 0)
    module.set_training(False)
    rng = np.random.default_rng(0)
    shapes = [s[1:] if len(s) == 4 else s for s in shapes]  # batchless
    inputs = [Tensor(rng.standard_normal(s)) for s in shapes]
    out, counted = analysis.counted_forward(module, *inputs)
    analytic = analysis.count_flops(
        module, shapes[0] if len(shapes) == 1 else tuple(shapes)).total_flops
    assert analytic == counted


def test_three_block_micro_net_counter_equality():
    steps = []
    in_c = 8
    for i, variant in enumerate(("vanilla", "se", "sase")):
        spec = BlockSpec(variant=variant, in_channels=in_c, channels=16,
                         bottleneck_ratio=2, heads=2)
        steps.append((f"b{i}", build_bottleneck(spec, seed=i)))
        in_c = 16
    net = nn.Sequential(steps)
    net.set_training(False)
    x = Tensor(np.random.default_rng(1).standard_normal((8, 6, 6)))
    out, counted = analysis.counted_forward(net, x)
    analytic = analysis.count_flops(net, (8, 6, 6)).total_flops
    assert analytic == counted


def test_cost_report_additive_under_composition():
    a = nn.Conv2d(4, 6, 3, padding=1, rng=np.random.default_rng(0))
    b = nn.Conv2d(6, 2, 1, rng=np.random.default_rng(1))
    seq = nn.Sequential([("a", a), ("b", b)])
    shape = (4, 5, 5)
    ra = analysis.count_flops(a, shape)
    rb = analysis.count_flops(b, (6, 5, 5))
    rseq = analysis.count_flops(seq, shape)
    assert rseq.total_flops == ra.total_flops + rb.total_flops
    assert rseq.total_params == ra.total_params + rb.total_params


def test_cost_report_serialization():
    conv = nn.Conv2d(2, 3, 3, rng=np.random.default_rng(0))
    rep = analysis.count_flops(conv, (2, 4, 4))
    d = rep.to_dict()
    assert d["total_params"] == rep.total_params
    rows = rep.csv_rows()
    assert rows[0] == ["name", "params", "flops", "output_shape"]
    assert rows[-1][0] == "TOTAL"


# ---------------------------------------------------------------------------
# scaling benchmark
# ---------------------------------------------------------------------------

DEFAULT_GRID = [(4, 4), (8, 8), (16, 16), (32, 32), (64, 64)]


def test_mhsa_scaling_is_superlinear():
    curve = analysis.scaling_bench("mhsa", 32, DEFAULT_GRID)
    assert curve.slope >= 1.7
    assert curve.core_slope == pytest.approx(2.0, abs=1e-9)


def test_sase_scaling_is_linear():
    curve = analysis.scaling_bench("sase_recog", 32, DEFAULT_GRID)
    assert 0.95 <= curve.slope <= 1.05


def test_doubling_ratios():
    mhsa = analysis.scaling_bench("mhsa", 32, DEFAULT_GRID)
    sase = analysis.scaling_bench("sase_recog", 32, DEFAULT_GRID)
    core = mhsa.core_points
    ratio_core = core[-1][1] / core[-2][1]
    assert abs(ratio_core - 16.0) <= 0.05 * 16.0
    pts = sase.points
    ratio = pts[-1][1] / pts[-2][1]
    assert abs(ratio - 4.0) <= 0.10 * 4.0


def test_scaling_bench_rejects_short_grid():
    with pytest.raises(ValueError):
        analysis.scaling_bench("mhsa", 32, [(4, 4), (8, 8)])
    with pytest.raises(ValueError):
        analysis.scaling_bench("mhsa", 32, [(4, 4), (8, 8), (8, 8)])


def test_scaling_deterministic():
    a = analysis.scaling_bench("se", 32, DEFAULT_GRID)
    b = analysis.scaling_bench("se", 32, DEFAULT_GRID)
    assert a.points == b.points and a.slope == b.slope


def test_fit_loglog_recovers_power():
    ns = [10, 100, 1000, 10000]
    slope, rms, excluded = analysis.fit_loglog(ns, [7 * n ** 1.5 for n in ns])
    assert slope == pytest.approx(1.5, abs=1e-9)
    assert rms <= 1e-12
    assert not excluded


def test_fit_loglog_excludes_contaminated_smallest():
    ns = [10, 100, 1000, 10000]
    fs = [7 * n ** 2 for n in ns]
    fs[0] *= 40.0   # constant-term contamination at the smallest size
    slope, _, excluded = analysis.fit_loglog(ns, fs)
    assert excluded
    assert slope == pytest.approx(2.0, abs=1e-9)


# ---------------------------------------------------------------------------
# gradcheck driver
# ---------------------------------------------------------------------------

def test_gradcheck_linear_is_tight():
    fc = nn.Linear(6, 3, rng=np.random.default_rng(0))
    report = analysis.gradcheck(fc, [(4, 6)], seed=0)
    assert report.passed
    assert report.max_rel_err <= 1e-8


class BrokenBackward(nn.Module):
    """Computes x*x but claims d/dx = 3x; gradcheck must call this out."""

    def forward(self, x):
        def backward_fn(g):
            return (3.0 * x.data * g,)
        return record_op(x.data * x.data, (x,), backward_fn, "broken_square", x.size)


def test_gradcheck_fails_broken_backward():
    report = analysis.gradcheck(BrokenBackward(), [(5,)], seed=0)
    assert not report.passed
    assert report.max_rel_err > 0.1


def test_gradcheck_rejects_f32_params():
    fc = nn.Linear(3, 2, rng=np.random.default_rng(0), dtype=np.float32)
    with pytest.raises(ValueError):
        analysis.gradcheck(fc, [(3,)], seed=0)


def test_gradcheck_subsamples_large_tensors():
    fc = nn.Linear(200, 60, rng=np.random.default_rng(0))  # 12060 params
    report = analysis.gradcheck(fc, [(2, 200)], seed=1, max_samples_per_tensor=16)
    assert report.passed
