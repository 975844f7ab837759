import numpy as np
import pytest

from conftest import rel_err
from scenenet import layers as F
from scenenet.arch import (
    ArchSpec,
    ConfigError,
    DownsampleKind,
    build,
    checkpoint_digest,
    deep_narrow,
    format_config,
    forward,
    load_checkpoint,
    parse_config,
    save_checkpoint,
    weighted_layers,
)
from scenenet.modules import Conv2d, DownsampleConv
from scenenet.tensor import DimensionError

KINDS = list(DownsampleKind)

# Layer layout of the original ResNet design (He et al. 2016):
# stage output widths and block counts per depth.
REFERENCE_TABLE = {
    18: ([64, 128, 256, 512], [2, 2, 2, 2]),
    50: ([256, 512, 1024, 2048], [3, 4, 6, 3]),
    101: ([256, 512, 1024, 2048], [3, 4, 23, 3]),
}


def stage_layout(net, size=224):
    """Observed (output width, block count) per stage from a static trace."""
    widths, counts = [], []
    for stage in range(1, 5):
        name = f"layer{stage}"
        seq = dict(net.body.layers)[name]
        counts.append(len(seq.layers))
        widths.append(seq.layers[-1][1].main.layers[-1][1].params["gamma"].shape[0])
    return widths, counts


@pytest.mark.parametrize("depth", [18, 50, 101])
def test_layout_matches_reference_table(depth):
    net = build(ArchSpec(depth, 1.0, 1000), init=False)
    assert stage_layout(net) == tuple(REFERENCE_TABLE[depth])
    assert net.spec.stage_widths == REFERENCE_TABLE[depth][0]


def test_half_width_stages():
    net = build(ArchSpec(50, 0.5, 1000), init=False)
    assert stage_layout(net)[0] == [128, 256, 512, 1024]


def test_deep_narrow_equals_resnet101_half():
    a = deep_narrow(365, init=False)
    b = build(ArchSpec(101, 0.5, 365), init=False)
    assert a.spec == b.spec
    assert {k: v.shape for k, v in a.named_params()} == {k: v.shape for k, v in b.named_params()}


@pytest.mark.parametrize("depth,wf", [(18, 0.25), (50, 1.0), (101, 0.5)])
def test_dp_param_shapes_match_strided(depth, wf):
    strided = build(ArchSpec(depth, wf, 365), init=False)
    for kind in KINDS:
        other = build(ArchSpec(depth, wf, 365, kind), init=False)
        assert [(k, v.shape) for k, v in other.named_params()] == [(k, v.shape) for k, v in strided.named_params()]


def test_deep_narrow_dp_param_shapes():
    a = deep_narrow(365, with_dp=False, init=False)
    b = deep_narrow(365, with_dp=True, init=False)
    assert [(k, v.shape) for k, v in a.named_params()] == [(k, v.shape) for k, v in b.named_params()]
    dp_layers = [p for p, m in b.named_modules() if isinstance(m, DownsampleConv)]
    # conv2 and the projection of the first block in stages 2-4
    assert len(dp_layers) == 6
    assert all(m.mode == "dilated" for _, m in b.named_modules() if isinstance(m, DownsampleConv))


@pytest.mark.parametrize("depth", [18, 50, 101])
def test_conv_params_scale_quadratically(depth):
    def conv_params(wf):
        net = build(ArchSpec(depth, wf, 10), init=False)
        return sum(m.params["weight"].size for _, m in net.named_modules() if isinstance(m, Conv2d))

    ratio = conv_params(0.5) / conv_params(1.0)
    assert 0.24 <= ratio <= 0.26


def test_stem_identical_across_kinds():
    stems = []
    for kind in KINDS:
        net = build(ArchSpec(50, 1.0, 10, kind), init=False)
        layers = dict(net.body.layers)
        stems.append((layers["conv1"].params["weight"].shape, layers["conv1"].stride, layers["maxpool"].size))
        assert not isinstance(layers["conv1"], DownsampleConv)
    assert stems[0] == ((64, 3, 7, 7), 2, 3)
    assert all(s == stems[0] for s in stems)


def test_unsupported_configuration():
    with pytest.raises(ConfigError, match="18, 50, 101"):
        ArchSpec(depth=34)
    with pytest.raises(ConfigError, match="0.25"):
        ArchSpec(width_factor=3)
    with pytest.raises(ConfigError):
        ArchSpec(downsample="bogus")


def test_seeded_build_is_deterministic():
    a = build(ArchSpec(18, 0.25, 10), seed=3)
    b = build(ArchSpec(18, 0.25, 10), seed=3)
    c = build(ArchSpec(18, 0.25, 10), seed=4)
    for (k, va), (_, vb), (_, vc) in zip(a.named_params(), b.named_params(), c.named_params()):
        assert np.array_equal(va, vb)
    assert not np.array_equal(a.param_dict()["conv1.weight"], c.param_dict()["conv1.weight"])


def test_initialisation_recipe():
    net = build(ArchSpec(50, 1.0, 1000), seed=0)
    w = net.param_dict()["layer3.0.conv2.weight"]  # 256 -> 256, 3x3
    assert abs(w.std() - np.sqrt(2 / (256 * 9))) < 0.02 * np.sqrt(2 / (256 * 9))
    fc = net.param_dict()["fc.weight"]
    assert np.abs(fc).max() <= 1 / np.sqrt(2048)
    assert (net.param_dict()["bn1.gamma"] == 1).all() and not net.param_dict()["bn1.beta"].any()


@pytest.mark.parametrize("kind", KINDS)
def test_forward_shapes(kind):
    net = build(ArchSpec(18, 0.25, 7, kind), seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64))
    assert forward(net, x, "eval").shape == (2, 7)
    assert forward(net, x, "train").shape == (2, 7)


def test_forward_224():
    net = build(ArchSpec(18, 0.25, 365), seed=0)
    assert forward(net, np.zeros((2, 3, 224, 224)), "eval").shape == (2, 365)


def test_forward_32_on_depth18():
    net = build(ArchSpec(18, 1.0, 10), seed=0)
    assert forward(net, np.zeros((1, 3, 32, 32))).shape == (1, 10)


def test_forward_rejects_bad_input():
    net = build(ArchSpec(18, 0.25, 10), seed=0)
    with pytest.raises(DimensionError):
        forward(net, np.zeros((1, 3, 48, 48)))
    with pytest.raises(DimensionError):
        forward(net, np.zeros((1, 1, 64, 64)))


def _replay_basic_resnet(params, buffers, x):
    """Eval-mode depth-18 forward written out by hand from the functional kernels."""
    def bn(name, y):
        p = F.BatchNormParams(params[f"{name}.gamma"], params[f"{name}.beta"],
                              buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"])
        return F.batchnorm_forward(y, p, "eval")[0]

    def cv(name, y, stride, pad):
        return F.conv2d_forward(y, F.ConvParams(params[f"{name}.weight"], stride, pad))

    y = F.relu(bn("bn1", cv("conv1", x, 2, 3)))
    y = F.pool2d(y, "max", 3, 2, 1)
    for stage in range(1, 5):
        for block in range(2):
            pre = f"layer{stage}.{block}"
            stride = 2 if stage > 1 and block == 0 else 1
            out = F.relu(bn(f"{pre}.bn1", cv(f"{pre}.conv1", y, stride, 1)))
            out = bn(f"{pre}.bn2", cv(f"{pre}.conv2", out, 1, 1))
            if f"{pre}.downsample.0.weight" in params:
                short = bn(f"{pre}.downsample.1", cv(f"{pre}.downsample.0", y, stride, 0))
            else:
                short = y
            y = F.relu(out + short)
    return F.linear(F.global_avg_pool(y), params["fc.weight"], params["fc.bias"])


def test_zero_input_matches_layer_replay():
    net = build(ArchSpec(18, 0.25, 5), seed=1, dtype=np.float64)
    rng = np.random.default_rng(5)
    for name, arr in net.named_params():
        if name.endswith(("gamma", "beta")):
            arr[...] = rng.uniform(0.5, 1.5, arr.shape) if name.endswith("gamma") else rng.uniform(-1, 1, arr.shape)
    for name, arr in net.named_buffers():
        arr[...] = rng.uniform(0.5, 1.5, arr.shape) if name.endswith("var") else rng.uniform(-0.5, 0.5, arr.shape)
    net.param_dict()["fc.bias"][...] = 0
    x = np.zeros((1, 3, 64, 64))
    out = forward(net, x, "eval")
    expected = _replay_basic_resnet(net.param_dict(), dict(net.named_buffers()), x)
    assert rel_err(out, expected) < 1e-12
    assert np.abs(out).max() > 0  # beta path is active


def test_eval_forward_is_pure():
    net = build(ArchSpec(18, 0.25, 5), seed=1)
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32))
    a = forward(net, x, "eval")
    b = forward(net, x, "eval")
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", KINDS)
def test_network_backward_spot_check(kind):
    spec = ArchSpec(18, 0.25, 4, kind, input_size=(16, 16), stem="small")
    net = build(spec, seed=2, dtype=np.float64)
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, (3, 3, 16, 16))
    labels = np.array([0, 1, 3])

    def loss():
        return F.softmax_cross_entropy(net.forward(x, train=True), labels)[0]

    _, g = F.softmax_cross_entropy(net.forward(x, train=True), labels)
    gx = net.backward(g)
    grads = net.grad_dict()

    def central(arr, i, eps):
        orig = arr[i]
        arr[i] = orig + eps
        up = loss()
        arr[i] = orig - eps
        down = loss()
        arr[i] = orig
        return (up - down) / (2 * eps)

    # A perturbation of an early weight moves every downstream ReLU and
    # max-pool input, so the step is kept small and points sitting on a kink
    # are detected by disagreement between two step sizes.
    checked = skipped = 0
    probes = [(net.param_dict()[n].reshape(-1), grads[n].reshape(-1), n)
              for n in ["conv1.weight", "layer2.0.conv1.weight", "layer2.0.downsample.0.weight",
                        "layer4.1.bn2.gamma", "fc.bias"]]
    probes.append((x.reshape(-1), gx.reshape(-1), "input"))
    for arr, ana, name in probes:
        for i in rng.choice(arr.size, 4, replace=False):
            num = central(arr, i, 1e-6)
            fine = central(arr, i, 1e-7)
            if abs(num - fine) > 1e-4 * max(abs(fine), 1e-3):
                skipped += 1
                continue
            checked += 1
            assert abs(num - ana[i]) <= 1e-4 * max(abs(num), 1e-3), (name, i, num, ana[i])
    assert skipped <= 2 and checked >= 22


def test_config_roundtrip_and_errors(tmp_path):
    spec = ArchSpec(101, 0.5, 365, "DilatedPool", (224, 224))
    assert parse_config(format_config(spec)) == spec
    text = "depth = 50\nwidth_factor: 0.5  # half\nclasses = 365\ndownsample = dp\ninput_size = 224\n"
    parsed = parse_config(text)
    assert parsed == ArchSpec(50, 0.5, 365, DownsampleKind.DilatedPool)
    with pytest.raises(ConfigError, match="^colour"):
        parse_config("colour = red")
    with pytest.raises(ConfigError, match="^classes"):
        parse_config("classes = many")


def test_checkpoint_roundtrip(tmp_path):
    net = build(ArchSpec(18, 0.25, 6, input_size=(32, 32), stem="small"), seed=11)
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    net.forward(x, train=True)  # perturb running stats
    net.norm = (np.array([0.5, 0.4, 0.3]), np.array([0.2, 0.25, 0.3]))
    save_checkpoint(net, tmp_path / "a", extra={"seed": 11})
    loaded, meta = load_checkpoint(tmp_path / "a")
    assert meta == {"seed": "11"}
    assert loaded.spec == net.spec
    for k, v in net.state_dict().items():
        assert np.array_equal(loaded.state_dict()[k], v), k
    np.testing.assert_array_equal(loaded.norm[0], net.norm[0])
    assert np.array_equal(forward(loaded, x), forward(net, x))
    save_checkpoint(loaded, tmp_path / "b", extra={"seed": 11})
    assert checkpoint_digest(tmp_path / "a") == checkpoint_digest(tmp_path / "b")


def test_first_nonfinite_names_layer():
    net = build(ArchSpec(18, 0.25, 3, input_size=(32, 32), stem="small"), seed=0)
    x = np.ones((2, 3, 32, 32), dtype=np.float32)
    assert net.first_nonfinite(x) is None
    net.param_dict()["layer2.0.conv2.weight"][0, 0, 0, 0] = np.nan
    assert net.first_nonfinite(x) == "layer2.0.conv2.weight (parameter)"
    net.param_dict()["layer2.0.conv2.weight"][0, 0, 0, 0] = 0
    x[0, 0, 0, 0] = np.inf
    assert net.first_nonfinite(x) == "conv1"


def test_weighted_layer_count_deep_narrow():
    net = deep_narrow(365, init=False)
    layers = weighted_layers(net)
    assert len(layers) == 101
    assert layers[-1] == "fc"
