import numpy as np
import pytest

from lw3d import graph
from lw3d.graph import (
    ARCHS,
    MODULE_GROUPS,
    WIDTH_TABLE,
    InceptionWidths,
    LayerSpec,
    ModuleGraph,
    allocate_groups,
    build_inception_module,
    build_network,
    infer_shapes,
    parse_manifest,
    parse_network_config,
    parse_shape_arg,
    shuffle_group_count,
)
from lw3d.tensor import Shape5

CANONICAL = Shape5(1, 3, 32, 224, 224)


class TestWidthTable:
    def test_module_names_in_network_order(self):
        assert list(WIDTH_TABLE) == ["3b", "3c", "4b", "4c", "4d", "4e", "4f", "5b", "5c"]

    def test_4b_row(self):
        assert WIDTH_TABLE["4b"] == InceptionWidths(192, 96, 208, 16, 48, 64)

    def test_group_output_channels(self):
        # running channel counts after each module group
        channels = {}
        c = 192
        for group, mods in MODULE_GROUPS.items():
            for mod in mods:
                c = WIDTH_TABLE[mod].out_channels
            channels[group] = c
        assert channels == {"mg3": 480, "mg4": 832, "mg5": 1024}

    def test_scaled_keeps_minimum_width(self):
        w = WIDTH_TABLE["3b"].scaled(0.01)
        assert min(w) == 1


class TestAllocateGroups:
    def test_canonical_4b_allocation(self):
        alloc = allocate_groups(16, (192, 208, 48, 64), in_channels=480)
        assert alloc.groups_per_path == (6, 6, 2, 2)
        assert alloc.channels_per_path == (180, 180, 60, 60)

    def test_equal_capacities(self):
        assert allocate_groups(4, (5, 5, 5, 5)).groups_per_path == (1, 1, 1, 1)

    def test_floor_guarantee(self):
        alloc = allocate_groups(16, (1, 1, 1, 13))
        assert sum(alloc.groups_per_path) == 16
        assert min(alloc.groups_per_path) >= 1

    def test_remainder_tie_goes_to_later_branch(self):
        # quotas (6.0, 6.5, 1.5, 2.0): the 0.5 tie between branches 2 and 3
        # must land on branch 3, otherwise the canonical (6,6,2,2) is lost
        alloc = allocate_groups(16, (192, 208, 48, 64))
        assert alloc.groups_per_path[2] == 2

    def test_conservation(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            caps = tuple(int(rng.integers(1, 400)) for _ in range(4))
            n = int(rng.integers(4, 17))
            alloc = allocate_groups(n, caps)
            assert sum(alloc.groups_per_path) == n
            assert min(alloc.groups_per_path) >= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            allocate_groups(3, (1, 1, 1, 1))
        with pytest.raises(ValueError):
            allocate_groups(16, (0, 1, 1, 1))
        with pytest.raises(ValueError):
            allocate_groups(16, (1, 1, 1, 1), in_channels=100)


class TestShuffleGroupCount:
    def test_sixteen_for_canonical_inputs(self):
        for c in (192, 256, 480, 512, 832):
            assert shuffle_group_count(c) == 16

    def test_prefers_even_unit(self):
        # 528/16 = 33 is odd; 12 is the largest count with an even unit
        assert shuffle_group_count(528) == 12

    def test_fallback_divisor(self):
        assert shuffle_group_count(60) == 15
        assert shuffle_group_count(104) == 13

    def test_no_divisor_raises(self):
        with pytest.raises(ValueError):
            shuffle_group_count(17)


class TestBuildNetwork:
    def test_rejects_unknown_arch(self):
        with pytest.raises(ValueError, match="unknown arch"):
            build_network("c3d", CANONICAL)

    def test_conv1_output_shape(self):
        g = build_network("i3d", CANONICAL)
        shapes = infer_shapes(g)
        assert shapes["conv1"] == Shape5(1, 64, 16, 112, 112)

    def test_factorized_stem_reaches_same_shape(self):
        for arch in ("ist", "sst", "gsst"):
            shapes = infer_shapes(build_network(arch, CANONICAL))
            assert shapes["conv1.temporal"] == Shape5(1, 64, 16, 112, 112)

    def test_pre_classifier_feature_map(self):
        for arch in ARCHS:
            g = build_network(arch, CANONICAL)
            shapes = infer_shapes(g)
            assert shapes["5c.concat"] == Shape5(1, 1024, 4, 7, 7)
            assert shapes["avgp"] == Shape5(1, 1024, 3, 1, 1)

    def test_classifier_channels(self):
        g = build_network("i3d", CANONICAL, num_classes=60)
        shapes = infer_shapes(g)
        assert shapes["classifier"].c == 60
        assert shapes[g.output_id].c == 60

    def test_sst_adds_one_shuffle_and_one_split_per_module(self):
        ist = build_network("ist", CANONICAL)
        sst = build_network("sst", CANONICAL)
        kinds_ist = [l.kind for l in ist.layers]
        kinds_sst = [l.kind for l in sst.layers]
        assert kinds_ist.count("shuffle") == 0
        assert kinds_sst.count("shuffle") == 9
        assert kinds_sst.count("split") == 9
        assert len(sst.layers) == len(ist.layers) + 18

    def test_i3d_and_ist_differ_only_in_factorized_convs(self):
        i3d = build_network("i3d", CANONICAL)
        ist = build_network("ist", CANONICAL)
        # every factorized location turns 1 conv (+bn+relu) into 2
        n_factorized = 1 + 1 + 9 * 2  # conv1, conv3, two branches per module
        assert len(ist.layers) == len(i3d.layers) + 3 * n_factorized

    def test_gsst_module_convs_grouped(self):
        g = build_network("gsst", CANONICAL)
        for lid in ("conv2", "3b.b1", "4b.b2.spatial", "5c.b4.proj"):
            assert g.layer(lid).params.groups == 2
        assert g.layer("conv1.spatial").params.groups == 1
        assert g.layer("classifier").params.groups == 1

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            ModuleGraph(
                [
                    LayerSpec("input", "input", Shape5(1, 1, 1, 1, 1)),
                    LayerSpec("input", "relu", None, ["input"]),
                ],
                "i3d",
                Shape5(1, 1, 1, 1, 1),
            )

    def test_forward_reference_rejected(self):
        with pytest.raises(ValueError, match="before definition"):
            ModuleGraph(
                [
                    LayerSpec("input", "input", Shape5(1, 1, 1, 1, 1)),
                    LayerSpec("a", "relu", None, ["b"]),
                ],
                "i3d",
                Shape5(1, 1, 1, 1, 1),
            )

    def test_width_multiplier_scales_classifier_input(self):
        g = build_network("gsst", Shape5(1, 3, 8, 32, 32), 2, width_mult=0.125)
        assert g.layer("classifier").params.in_channels == 128

    def test_shape_error_names_offending_layer(self):
        # a 1-frame clip survives the stem but dies at the temporal pools
        with pytest.raises(ValueError, match="maxp4"):
            infer_shapes(build_network("i3d", Shape5(1, 3, 1, 224, 224)))


class TestInceptionModule:
    def test_i3d_module_branches_concat(self):
        g = build_inception_module(WIDTH_TABLE["4b"], "i3d", 480, name="4b")
        shapes = infer_shapes(g)
        assert shapes["4b.concat"] == Shape5(1, 512, 8, 14, 14)

    def test_sst_split_matches_allocation(self):
        g = build_inception_module(WIDTH_TABLE["4b"], "sst", 480, name="4b")
        assert g.layer("4b.split").params.sizes == (180, 180, 60, 60)
        assert g.layer("4b.shuffle").params == 16

    def test_branch_two_factorization_widths(self):
        g = build_inception_module(WIDTH_TABLE["4b"], "ist", 480, name="4b")
        spatial = g.layer("4b.b2.spatial").params
        temporal = g.layer("4b.b2.temporal").params
        assert (spatial.in_channels, spatial.out_channels) == (96, 96)
        assert spatial.kernel == (1, 3, 3)
        assert (temporal.in_channels, temporal.out_channels) == (96, 208)
        assert temporal.kernel == (3, 1, 1)


class TestManifest:
    def test_round_trip(self):
        g = build_network("gsst", CANONICAL)
        text = graph.emit_manifest(g)
        records = parse_manifest(text)
        layers = graph.parameterized_layers(g)
        assert len(records) == len(layers)
        for (rid, kind, params), layer in zip(records, layers):
            assert rid == layer.id
            assert kind == layer.kind
            assert params == layer.params

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            parse_manifest("x\tdropout\t1\n")


class TestConfig:
    def test_parse_shape_arg(self):
        assert parse_shape_arg("3x32x224x224") == (3, 32, 224, 224)
        with pytest.raises(ValueError):
            parse_shape_arg("3x0x4x4")
        with pytest.raises(ValueError):
            parse_shape_arg("3xax4x4")

    def test_config_round_trip(self, tmp_path):
        path = tmp_path / "net.ini"
        path.write_text(
            "[network]\n"
            "arch = sst\n"
            "input = 3x32x224x224\n"
            "classes = 10\n"
            "width_mult = 0.5\n"
            "\n"
            "[widths.4b]\n"
            "b1 = 100\nb2_reduce = 50\nb2_out = 100\nb3_reduce = 10\n"
            "b3_out = 20\nb4_proj = 30\n"
        )
        cfg = parse_network_config(path)
        assert cfg.arch == "sst"
        assert cfg.input == (3, 32, 224, 224)
        assert cfg.classes == 10
        assert cfg.width_mult == 0.5
        assert cfg.width_overrides["4b"] == InceptionWidths(100, 50, 100, 10, 20, 30)

    def test_config_rejects_unknown_module(self, tmp_path):
        path = tmp_path / "net.ini"
        path.write_text("[network]\narch = i3d\ninput = 3x8x32x32\n\n[widths.9z]\nb1 = 1\n")
        with pytest.raises(ValueError, match="9z"):
            parse_network_config(path)
