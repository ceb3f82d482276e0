import pytest

from parapilot.errors import SpecError, UnsupportedDeviceCountError
from parapilot.specs import (
    CostProfile,
    load_cluster_spec,
    load_cost_profile,
    load_model_spec,
)

from helpers import uniform_model


def bert_huge_32_doc():
    return {
        "name": "bert-huge-32",
        "ms_bytes_per_param_byte": 4.0,
        "layers": [
            {
                "kind": "encoder",
                "param_bytes": 84_000_000,
                "bnd_bytes_per_sample": 10_485_760,
                "int_bytes_per_sample": 92_274_688,
                "fwd_time_per_sample": 0.0045,
            }
            for _ in range(32)
        ],
    }


def cluster_doc(n=8, island=8):
    return {
        "n_devices": n,
        "mem_budget_bytes": 8 * 2**30,
        "island_size": island,
        "intra_island_bw": 12e9,
        "inter_island_bw": 10e9,
        "overlap_slowdown": 1.3,
    }


class TestModelSpec:
    def test_32_identical_encoder_layers(self):
        model = load_model_spec(bert_huge_32_doc())
        assert model.num_layers == 32
        assert [l.id for l in model.layers] == list(range(32))
        assert all(l.kind == "encoder" for l in model.layers)

    def test_single_layer_document(self):
        doc = bert_huge_32_doc()
        doc["layers"] = doc["layers"][:1]
        assert load_model_spec(doc).num_layers == 1

    def test_zero_param_bytes_names_the_layer(self):
        doc = bert_huge_32_doc()
        doc["layers"][2]["param_bytes"] = 0
        with pytest.raises(SpecError, match=r"layer 2.*param_bytes"):
            load_model_spec(doc)

    def test_empty_layer_list_rejected(self):
        doc = bert_huge_32_doc()
        doc["layers"] = []
        with pytest.raises(SpecError, match="layers"):
            load_model_spec(doc)

    def test_ms_multiplier_below_one_rejected(self):
        doc = bert_huge_32_doc()
        doc["ms_bytes_per_param_byte"] = 0.5
        with pytest.raises(SpecError, match="ms_bytes_per_param_byte"):
            load_model_spec(doc)

    def test_replication_fraction_out_of_range(self):
        doc = bert_huge_32_doc()
        doc["layers"][0]["tp_act_replication_fraction"] = 1.5
        with pytest.raises(SpecError, match=r"layer 0.*tp_act_replication_fraction"):
            load_model_spec(doc)

    def test_ingestion_is_pure(self):
        assert load_model_spec(bert_huge_32_doc()) == load_model_spec(bert_huge_32_doc())

    def test_round_trip(self):
        model = load_model_spec(bert_huge_32_doc())
        assert load_model_spec(model.to_document()) == model


class TestClusterSpec:
    def test_single_node_eight_gpus(self):
        cluster = load_cluster_spec(cluster_doc())
        assert cluster.n_devices == 8
        assert cluster.island_size == 8

    def test_six_devices_rejected(self):
        with pytest.raises(UnsupportedDeviceCountError):
            load_cluster_spec(cluster_doc(n=6))

    def test_two_island_cluster(self):
        cluster = load_cluster_spec(cluster_doc(n=16, island=8))
        assert cluster.n_devices == 16
        assert cluster.island_size == 8

    def test_island_must_divide_devices(self):
        doc = cluster_doc(n=8, island=8)
        doc["island_size"] = 16
        with pytest.raises(SpecError):
            load_cluster_spec(doc)

    def test_bandwidth_ordering_enforced(self):
        doc = cluster_doc()
        doc["intra_island_bw"] = 1e9
        with pytest.raises(SpecError, match="intra_island_bw"):
            load_cluster_spec(doc)

    def test_overlap_slowdown_defaults(self):
        doc = cluster_doc()
        del doc["overlap_slowdown"]
        assert load_cluster_spec(doc).overlap_slowdown == 1.3

    def test_round_trip(self):
        cluster = load_cluster_spec(cluster_doc(n=16, island=8))
        assert load_cluster_spec(cluster.to_document()) == cluster


class TestCostProfile:
    def test_empty_document_gives_defaults(self):
        model = uniform_model(4)
        profile = load_cost_profile({}, model)
        assert profile.bwd_fwd_ratio == 2.0
        assert profile.collective_efficiency == 1.0
        assert profile.fwd_time(model.layers[0]) == model.layers[0].fwd_time_per_sample

    def test_override_reflected(self):
        model = uniform_model(4)
        profile = load_cost_profile({"layer_overrides": {"0": 0.123}}, model)
        assert profile.fwd_time(model.layers[0]) == 0.123
        assert profile.fwd_time(model.layers[1]) == model.layers[1].fwd_time_per_sample

    def test_unknown_layer_rejected(self):
        model = uniform_model(32)
        with pytest.raises(SpecError, match="99"):
            load_cost_profile({"layer_overrides": {"99": 0.1}}, model)

    def test_non_positive_time_rejected(self):
        model = uniform_model(4)
        with pytest.raises(SpecError, match="layer_overrides"):
            load_cost_profile({"layer_overrides": {"1": 0.0}}, model)

    def test_collective_efficiency_range(self):
        model = uniform_model(2)
        with pytest.raises(SpecError, match="collective_efficiency"):
            load_cost_profile({"collective_efficiency": 0.0}, model)

    def test_round_trip(self):
        model = uniform_model(4)
        profile = load_cost_profile(
            {"bwd_fwd_ratio": 1.8, "collective_efficiency": 0.9,
             "layer_overrides": {"1": 0.2}},
            model,
        )
        doc = profile.to_document()
        assert load_cost_profile(doc, model) == CostProfile(
            bwd_fwd_ratio=1.8, collective_efficiency=0.9, layer_overrides={1: 0.2}
        )
