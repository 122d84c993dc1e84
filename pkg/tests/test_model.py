import json

import pytest
from hypothesis import given, settings, strategies as st

from fprog.cli import data_path
from fprog.model import (
    Hyperparameters,
    LayerSpec,
    ModelError,
    build_model,
    conv,
    dense,
    infer_layer,
    load_model,
    maxpool,
    output,
    parse_model,
    serialize_model,
    shape_infer,
)

MLP_TEXT = json.dumps(
    {
        "input_shape": [20, 20, 1],
        "layers": [
            {"kind": "Input"},
            {"kind": "FullyConnected", "out_channels": 25},
            {"kind": "Output", "out_channels": 10},
        ],
        "hyperparameters": {"learning_rate": 0.1},
    }
)

VGG_SHAPES = [
    (224, 224, 3),
    (224, 224, 64), (224, 224, 64), (112, 112, 64),
    (112, 112, 128), (112, 112, 128), (56, 56, 128),
    (56, 56, 256), (56, 56, 256), (56, 56, 256), (28, 28, 256),
    (28, 28, 512), (28, 28, 512), (28, 28, 512), (14, 14, 512),
    (14, 14, 512), (14, 14, 512), (14, 14, 512), (7, 7, 512),
    (1, 1, 4096), (1, 1, 4096), (1, 1, 1000),
]


def test_parse_minimal_mlp():
    m = parse_model(MLP_TEXT)
    assert [l.kind for l in m.layers] == ["Input", "FullyConnected", "Output"]
    assert shape_infer(m) == [(20, 20, 1), (1, 1, 25), (1, 1, 10)]
    assert m.layers[1].activation == "ReLU"
    assert m.layers[2].activation == "Softmax"


def test_dropout_one_rejected():
    doc = json.loads(MLP_TEXT)
    doc["hyperparameters"]["dropout_p"] = 1.0
    with pytest.raises(ModelError) as err:
        parse_model(json.dumps(doc))
    assert err.value.field == "dropout_p"


def test_vgg16_rows_and_shapes():
    m = load_model(data_path("vgg16.json"))
    assert len(m.layers) - 1 == 21
    assert shape_infer(m) == VGG_SHAPES
    total = sum(h * w * c for h, w, c in shape_infer(m))
    assert total == 15_237_608


@pytest.mark.parametrize(
    "layer, shape, expected",
    [
        (conv(64, 3), (224, 224, 3), (224, 224, 64)),
        (maxpool(2, 2), (224, 224, 64), (112, 112, 64)),
        (dense(4096), (7, 7, 512), (1, 1, 4096)),
        (maxpool(2, 2), (15, 15, 8), (7, 7, 8)),
        (conv(4, 3, 2), (7, 7, 1), (4, 4, 4)),
    ],
)
def test_shape_examples(layer, shape, expected):
    assert infer_layer(layer, shape) == expected


def test_errors_name_layer_and_field():
    doc = json.loads(MLP_TEXT)
    doc["layers"][1]["kind"] = "Dense"
    with pytest.raises(ModelError) as err:
        parse_model(json.dumps(doc))
    assert err.value.layer == 1 and err.value.field == "kind"
    doc = json.loads(MLP_TEXT)
    doc["layers"][1]["filter_size"] = 0
    with pytest.raises(ModelError) as err:
        parse_model(json.dumps(doc))
    assert err.value.layer == 1


def test_unknown_keys_strict_and_lax():
    doc = json.loads(MLP_TEXT)
    doc["layers"][1]["colour"] = "blue"
    with pytest.raises(ModelError):
        parse_model(json.dumps(doc))
    assert len(parse_model(json.dumps(doc), strict=False).layers) == 3


def test_structure_rules():
    with pytest.raises(ModelError):
        build_model((4, 4, 1), [LayerSpec("Input"), conv(2)])
    with pytest.raises(ModelError):
        build_model((4, 4, 1), [LayerSpec("Input"), output(2), output(2)])
    with pytest.raises(ModelError):
        build_model((1, 1, 1), [LayerSpec("Input"), maxpool(2, 2), output(2)])
    with pytest.raises(ModelError):
        build_model((4, 4, 1), [LayerSpec("Input"), conv(2, activation="Softmax"), output(2)])


def test_feedback_partner_rules():
    enh = LayerSpec("EnhancementUnit", mask_size=3, feedback_partner=3)
    ok = build_model((6, 6, 1), [LayerSpec("Input"), enh, conv(2), LayerSpec("EnhancementUnit", mask_size=3), output(2)])
    assert ok.layers[1].feedback_partner == 3
    with pytest.raises(ModelError):
        build_model((6, 6, 1), [LayerSpec("Input"), enh, conv(2), LayerSpec("EnhancementUnit", mask_size=5), output(2)])
    with pytest.raises(ModelError):
        build_model((6, 6, 1), [LayerSpec("Input"), enh, maxpool(), LayerSpec("EnhancementUnit", mask_size=3), output(2)])
    with pytest.raises(ModelError):
        build_model((6, 6, 1), [LayerSpec("Input"), LayerSpec("EnhancementUnit", mask_size=4), output(2)])


def test_inception_concatenates_channels():
    module = LayerSpec(
        "InceptionModule",
        branches=((conv(2, 1),), (conv(3, 3),), (conv(1, 1), conv(5, 5))),
    )
    m = build_model((8, 8, 3), [LayerSpec("Input"), module, output(4)])
    assert shape_infer(m)[1] == (8, 8, 10)


def test_vgg16_round_trip():
    m = load_model(data_path("vgg16.json"))
    assert parse_model(serialize_model(m)) == m


layer_strategy = st.one_of(
    st.builds(conv, st.integers(1, 8), st.sampled_from([1, 3, 5]), st.integers(1, 2), st.sampled_from(["same", "valid"]),
              st.sampled_from(["ReLU", "Identity"])),
    st.builds(maxpool, st.just(2), st.integers(1, 2)),
)


@settings(max_examples=60, deadline=None)
@given(
    hw=st.integers(8, 16),
    c=st.integers(1, 4),
    body=st.lists(layer_strategy, max_size=3),
    n_out=st.integers(1, 12),
    lr=st.floats(0, 1),
    mode=st.sampled_from(["GD", "miniBatchGD", "SGD"]),
    p=st.floats(0, 0.9),
)
def test_round_trip_property(hw, c, body, n_out, lr, mode, p):
    try:
        m = build_model((hw, hw, c), [LayerSpec("Input"), *body, output(n_out)],
                        Hyperparameters(learning_rate=lr, batch_mode=mode, dropout_p=p))
    except ModelError:
        return
    again = parse_model(serialize_model(m))
    assert again == m
    shapes = shape_infer(again)
    assert all(h >= 1 and w >= 1 and ch >= 1 for h, w, ch in shapes)
    assert shapes[-1] == (1, 1, n_out)
