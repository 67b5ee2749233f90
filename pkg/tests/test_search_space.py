import pytest
from hypothesis import given, strategies as st

from slimgan.search_space import (
    Architecture,
    ArchLayer,
    ConvOp,
    OperatorKind,
    SearchSpaceError,
    build_sr_supernet,
    build_translation_supernet,
    candidate_widths,
    max_architecture,
    min_architecture,
    spec_for_architecture,
    validate_architecture,
)


class TestCandidateWidths:
    def test_ladder_256(self):
        assert candidate_widths(256) == (88, 128, 192, 216, 256)

    def test_ladder_64(self):
        assert candidate_widths(64) == (24, 32, 48, 56, 64)

    def test_ladder_collapses_at_8(self):
        assert candidate_widths(8) == (8,)

    @pytest.mark.parametrize("bad", [0, -8, 7, 12, 100])
    def test_rejects_non_multiples_of_8(self, bad):
        with pytest.raises(SearchSpaceError):
            candidate_widths(bad)

    @given(st.integers(min_value=1, max_value=256).map(lambda k: 8 * k))
    def test_ladder_properties(self, max_width):
        widths = candidate_widths(max_width)
        assert list(widths) == sorted(set(widths))
        assert all(w % 8 == 0 for w in widths)
        assert widths[-1] == max_width


class TestTranslationSupernet:
    def test_layer_counts(self):
        spec = build_translation_supernet(256)
        assert len(spec.layers) == 15
        assert len(spec.searchable_op_layers()) == 9
        assert len(spec.searchable_width_layers()) == 14

    def test_frame_shape(self):
        spec = build_translation_supernet(256)
        stem0, stem1, stem2 = spec.layers[:3]
        assert stem0.op == ConvOp(7) and stem0.stride == 1
        assert stem1.op == ConvOp(3) and stem1.stride == 2
        assert stem2.op == ConvOp(3) and stem2.stride == 2
        h1, h2, h3 = spec.layers[-3:]
        assert h1.op.transposed and h2.op.transposed
        assert h3.op == ConvOp(7) and h3.width == 3

    def test_final_conv_has_no_norm(self):
        spec = build_translation_supernet(256)
        assert spec.layers[-1].norm == "none"
        assert all(l.norm == "instance_norm" for l in spec.layers[:-1])

    def test_deterministic_construction(self):
        assert build_translation_supernet(256) == build_translation_supernet(256)

    def test_rejects_bad_width(self):
        with pytest.raises(SearchSpaceError):
            build_translation_supernet(100)


class TestSrSupernet:
    def test_body_is_five_groups_of_five(self):
        spec = build_sr_supernet(64)
        body = spec.searchable_op_layers()
        assert len(body) == 25
        assert sorted({l.rir_group for l in body}) == [1, 2, 3, 4, 5]

    def test_no_normalization_anywhere(self):
        spec = build_sr_supernet(64)
        assert all(l.norm == "none" for l in spec.layers)

    def test_scale_factor(self):
        assert build_sr_supernet(64).sr_scale == 4

    def test_trunk_skips_from_stem(self):
        spec = build_sr_supernet(64)
        assert spec.layer("trunk").skip_from == "stem"

    def test_deterministic_construction(self):
        assert build_sr_supernet(64) == build_sr_supernet(64)


class TestSearchableSlots:
    @pytest.mark.parametrize("spec", [build_translation_supernet(256), build_sr_supernet(64)])
    def test_body_layers_expose_full_candidate_sets(self, spec):
        for layer in spec.searchable_op_layers():
            assert layer.op is None  # all four operator kinds apply
            assert layer.width_candidates() == candidate_widths(layer.max_width)
        assert len(OperatorKind) == 4


class TestValidation:
    def test_max_and_min_architectures_validate(self):
        spec = build_translation_supernet(64)
        validate_architecture(max_architecture(spec), spec)
        validate_architecture(min_architecture(spec), spec)

    def test_out_of_ladder_multiple_of_8_is_accepted(self):
        # reference generators predate the ladder; 64 is fine under a 256 cap
        spec = build_translation_supernet(256)
        arch = max_architecture(spec)
        patched = Architecture(
            task=arch.task,
            layers=(ArchLayer("stem0", "conv7x7", 64),) + arch.layers[1:],
        )
        validate_architecture(patched, spec)

    def test_rejects_width_not_multiple_of_8(self):
        spec = build_translation_supernet(256)
        arch = max_architecture(spec)
        patched = Architecture(
            task=arch.task,
            layers=(ArchLayer("stem0", "conv7x7", 100),) + arch.layers[1:],
        )
        with pytest.raises(SearchSpaceError, match="100"):
            validate_architecture(patched, spec)

    def test_rejects_overwide_layer(self):
        spec = build_translation_supernet(64)
        arch = max_architecture(spec)
        patched = Architecture(
            task=arch.task,
            layers=(ArchLayer("stem0", "conv7x7", 128),) + arch.layers[1:],
        )
        with pytest.raises(SearchSpaceError):
            validate_architecture(patched, spec)

    def test_rejects_wrong_fixed_width(self):
        spec = build_translation_supernet(64)
        arch = max_architecture(spec)
        patched = Architecture(
            task=arch.task,
            layers=arch.layers[:-1] + (ArchLayer("header3", "conv7x7", 8),),
        )
        with pytest.raises(SearchSpaceError):
            validate_architecture(patched, spec)

    def test_rejects_unknown_body_operator(self):
        spec = build_translation_supernet(64)
        arch = max_architecture(spec)
        layers = list(arch.layers)
        layers[3] = ArchLayer("b1", "Conv5x5", 64)
        with pytest.raises(SearchSpaceError):
            validate_architecture(Architecture(task=arch.task, layers=tuple(layers)), spec)


class TestSpecForArchitecture:
    def test_translation_round_trip(self):
        spec = build_translation_supernet(256, body_layers=9)
        arch = max_architecture(spec)
        rebuilt = spec_for_architecture(arch)
        assert rebuilt.task == "translation"
        assert len(rebuilt.layers) == len(spec.layers)

    def test_sr_round_trip(self):
        spec = build_sr_supernet(64)
        arch = min_architecture(spec)
        rebuilt = spec_for_architecture(arch)
        assert len(rebuilt.searchable_op_layers()) == 25
