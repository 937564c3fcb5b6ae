from backend.core.registry import PropertyRegistry
from backend.services.config import RunConfig

EXPECTED = {
    "alignment.latent_frame_counts",
    "alignment.box_windows_match_codec",
    "alignment.encoder_lengths",
    "alignment.reduce_tokens_static",
    "codec.full_rank_roundtrip",
    "codec.psnr_closed_form",
    "codec.parallel_encode",
    "flow.interpolation_endpoints",
    "flow.oracle_euler",
    "flow.cfg_identity",
    "flow.condition_drop_rate",
    "flow.linear_model_learns",
    "gradients.primitives",
    "gradients.end_to_end",
    "scheduler.batch_sizes",
    "scheduler.repeat_sparse",
    "scheduler.single_type_per_group",
    "sequence.attention_equivalence",
    "sequence.trace_accounting",
}


def check_never_registered(config):
    raise RuntimeError("boom")


def test_discovers_every_property_module():
    assert set(PropertyRegistry().list_properties()) == EXPECTED


def test_test_modules_are_not_discovered():
    assert "test_properties.never_registered" not in PropertyRegistry().get_registry()


def test_unknown_property_fails():
    (outcome,) = PropertyRegistry().run(RunConfig(), ["codec.nothing"])
    assert not outcome.passed and outcome.detail == "no such property"


def test_raising_check_counts_as_failure():
    registry = PropertyRegistry()
    registry._registry["fake.boom"] = {"module_path": "backend.verify.test_properties", "function_name": "check_never_registered"}
    (outcome,) = registry.run(RunConfig(), ["fake.boom"])
    assert not outcome.passed
    assert outcome.detail == "RuntimeError: boom"
    assert outcome.record()["property"] == "fake.boom"


def test_selected_properties_run_in_given_order():
    outcomes = PropertyRegistry().run(RunConfig(), ["codec.psnr_closed_form", "alignment.latent_frame_counts"])
    assert [o.name for o in outcomes] == ["codec.psnr_closed_form", "alignment.latent_frame_counts"]
    assert all(o.passed for o in outcomes)


def test_missing_package_gives_an_empty_registry():
    assert PropertyRegistry("backend.no_such_package").list_properties() == []
