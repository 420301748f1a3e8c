import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chiron.sandbox import (
    ConfigRejected,
    IoChannel,
    IoRequest,
    JobState,
    ModelConfig,
    decode_status,
    encode_config,
    encode_status,
    policy_check,
    validate_config,
)
from chiron.taint import Label, TaintedBytes, public


def config_doc(**changes):
    doc = {
        "schema_version": 1,
        "seed": 5,
        "layers": [
            {"kind": "DENSE", "input_dim": 4, "output_dim": 8, "activation": "RELU"},
            {"kind": "DENSE", "input_dim": 8, "output_dim": 2, "activation": "IDENTITY"},
        ],
        "loss": "SOFTMAX_CROSS_ENTROPY",
        "optimizer": {"kind": "SGD", "learning_rate": 0.05, "batch_size": 16, "epochs": 3},
        "sync_period": 1,
    }
    doc.update(changes)
    return doc


def raw(doc) -> bytes:
    return json.dumps(doc).encode()


def rejected(data: bytes) -> ConfigRejected:
    with pytest.raises(ConfigRejected) as err:
        validate_config(data)
    return err.value


def test_valid_config():
    cfg = validate_config(raw(config_doc()))
    assert isinstance(cfg, ModelConfig)
    assert (cfg.input_dim, cfg.n_classes) == (4, 2)
    assert cfg.n_params == 4 * 8 + 8 + 8 * 2 + 2


def test_canonical_roundtrip():
    cfg = validate_config(raw(config_doc()))
    assert validate_config(encode_config(cfg)) == cfg
    assert encode_config(validate_config(encode_config(cfg))) == encode_config(cfg)


def test_dim_mismatch():
    doc = config_doc()
    doc["layers"][1]["input_dim"] = 9
    err = rejected(raw(doc))
    assert (err.code, err.path) == ("DIM_MISMATCH", "layers[1].input_dim")


def test_zero_learning_rate():
    doc = config_doc()
    doc["optimizer"]["learning_rate"] = 0
    err = rejected(raw(doc))
    assert (err.code, err.path) == ("LIMIT_EXCEEDED", "optimizer.learning_rate")


@pytest.mark.parametrize("lr", [-1, 10.5, 10**400])
def test_learning_rate_range(lr):
    doc = config_doc()
    doc["optimizer"]["learning_rate"] = lr
    assert rejected(raw(doc)).code == "LIMIT_EXCEEDED"


def test_unknown_field():
    err = rejected(raw(config_doc(exfil_channel="TO_PROVIDER")))
    assert (err.code, err.path) == ("UNKNOWN_FIELD", "exfil_channel")
    doc = config_doc()
    doc["layers"][0]["hook"] = "x"
    assert rejected(raw(doc)).path == "layers[0].hook"


@pytest.mark.parametrize("data", [
    b"", b"not json", b"[]", b'{"a":1,"a":2}', b"\xff\xfe",
    b'{"schema_version": NaN}', b"[" * 100000,
])
def test_parse_errors(data):
    assert rejected(data).code in ("PARSE_ERROR", "UNKNOWN_FIELD")


def test_missing_field():
    doc = config_doc()
    del doc["seed"]
    assert rejected(raw(doc)).code == "PARSE_ERROR"


def test_final_layer_must_be_identity():
    doc = config_doc()
    doc["layers"][1]["activation"] = "RELU"
    assert rejected(raw(doc)).code == "LIMIT_EXCEEDED"


@pytest.mark.parametrize("field,value", [
    ("batch_size", 0), ("epochs", 0), ("batch_size", True), ("epochs", 1.5),
])
def test_optimizer_integers(field, value):
    doc = config_doc()
    doc["optimizer"][field] = value
    assert rejected(raw(doc)).code in ("LIMIT_EXCEEDED", "PARSE_ERROR")


def test_unsupported_schema_version():
    assert rejected(raw(config_doc(schema_version=2))).code == "PARSE_ERROR"


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=400))
def test_total_over_bytes(data):
    try:
        validate_config(data)
    except ConfigRejected:
        pass


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False) | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=8), inner, max_size=3),
    max_leaves=10,
)


@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.sampled_from(list(config_doc()) + ["x"]), json_values))
def test_total_over_json(doc):
    try:
        validate_config(raw(doc))
    except ConfigRejected:
        pass


# -- policy -----------------------------------------------------------------

def test_secret_to_provider_denied():
    d = policy_check(IoRequest(IoChannel.TO_PROVIDER, TaintedBytes(b"x", Label.HOLDER_SECRET)))
    assert not d and d.reason == "SECRET_EGRESS"


def test_sealed_record_to_holder_allowed():
    assert policy_check(IoRequest(IoChannel.TO_HOLDER_CHANNEL, public(b"ciphertext")))


def test_raw_params_to_holder_denied():
    d = policy_check(IoRequest(IoChannel.TO_HOLDER_CHANNEL,
                               TaintedBytes(b"\x00" * 16, Label.PROVIDER_SECRET)))
    assert not d and d.reason == "SECRET_EGRESS"


def test_provider_vocabulary():
    status = TaintedBytes(encode_status(JobState.RUNNING, 3), Label.BOTH_SECRET)
    assert policy_check(IoRequest(IoChannel.TO_PROVIDER, public(b"rec"), status))
    other = TaintedBytes(b"epoch 3 loss 0.2", Label.BOTH_SECRET)
    d = policy_check(IoRequest(IoChannel.TO_PROVIDER, public(b"rec"), other))
    assert not d and d.reason == "NOT_IN_VOCABULARY"
    assert policy_check(IoRequest(IoChannel.TO_PROVIDER, public(bytes(192))))
    assert not policy_check(IoRequest(IoChannel.TO_PROVIDER, public(bytes(191))))


@given(st.sampled_from(list(IoChannel)), st.binary(max_size=64),
       st.sampled_from([Label.HOLDER_SECRET, Label.PROVIDER_SECRET, Label.BOTH_SECRET]))
def test_no_secret_ever_allowed(channel, data, label):
    assert not policy_check(IoRequest(channel, TaintedBytes(data, label)))


def test_status_codec():
    assert encode_status(JobState.DONE, 7) == bytes([4]) + (7).to_bytes(8, "big")
    assert decode_status(encode_status(JobState.FAILED, 2**64 - 1)) == (JobState.FAILED, 2**64 - 1)
    with pytest.raises(ValueError):
        decode_status(bytes(8))
