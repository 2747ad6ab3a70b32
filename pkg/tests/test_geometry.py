"""Box arithmetic, coordinate mapping, and perturbation behavior."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcrit.geometry import (
    BoxError,
    DegeneratePixelBoxError,
    GridBox,
    GridSpace,
    Margins,
    PerturbConfig,
    PixelBox,
    _perturb_candidates,
    clamp_to_space,
    expand_with_context,
    format_box,
    format_coord,
    generate_perturb,
    generate_perturbed_fewshot_examples,
    grid_to_pixel,
    iou,
    margins,
    pixel_to_grid,
    validate_in_space,
)

SPACE = GridSpace()


def cell_count_iou(a: GridBox, b: GridBox) -> float:
    """IoU for integer boxes by literally counting unit cells."""
    cells_a = {
        (x, y)
        for x in range(int(a.left), int(a.right))
        for y in range(int(a.top), int(a.bottom))
    }
    cells_b = {
        (x, y)
        for x in range(int(b.left), int(b.right))
        for y in range(int(b.top), int(b.bottom))
    }
    union = cells_a | cells_b
    inter = cells_a & cells_b
    return len(inter) / len(union)


def random_int_box(rng: random.Random, space: GridSpace = SPACE) -> GridBox:
    w = int(space.width_units)
    h = int(space.height_units)
    left = rng.randint(0, w - 1)
    right = rng.randint(left + 1, w)
    top = rng.randint(0, h - 1)
    bottom = rng.randint(top + 1, h)
    return GridBox(left, top, right, bottom)


class TestGridBox:
    def test_rejects_flipped_edges(self):
        with pytest.raises(BoxError):
            GridBox(5, 0, 2, 3)
        with pytest.raises(BoxError):
            GridBox(0, 9, 2, 3)

    def test_rejects_zero_area(self):
        with pytest.raises(BoxError):
            GridBox(1, 1, 1, 4)

    def test_derived_properties(self):
        b = GridBox(2, 5, 3, 10)
        assert b.width == 1
        assert b.height == 5
        assert b.area == 5
        assert b.as_tuple() == (2, 5, 3, 10)

    def test_validate_in_space(self):
        validate_in_space(GridBox(0, 0, 9, 16), SPACE)
        with pytest.raises(BoxError):
            validate_in_space(GridBox(-0.1, 0, 9, 16), SPACE)
        with pytest.raises(BoxError):
            validate_in_space(GridBox(0, 0, 9.1, 16), SPACE)


class TestIou:
    def test_identical_boxes(self):
        b = GridBox(1, 2, 4, 6)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(GridBox(0, 0, 1, 1), GridBox(2, 2, 3, 3)) == 0.0

    def test_touching_edges_is_zero(self):
        assert iou(GridBox(0, 0, 2, 2), GridBox(2, 0, 4, 2)) == 0.0

    def test_known_overlap(self):
        # inter 1x1, union 4+4-1
        assert iou(GridBox(0, 0, 2, 2), GridBox(1, 1, 3, 3)) == 1 / 7

    def test_matches_cell_counting_oracle(self):
        rng = random.Random(7)
        for _ in range(500):
            a = random_int_box(rng)
            b = random_int_box(rng)
            assert iou(a, b) == cell_count_iou(a, b)

    @given(
        st.tuples(
            st.floats(0, 8), st.floats(0, 15), st.floats(0.25, 9), st.floats(0.25, 16)
        )
    )
    def test_symmetric_and_bounded(self, raw):
        left, top, dw, db = raw
        try:
            a = GridBox(left, top, min(left + dw + 0.01, 9.0), min(top + db + 0.01, 16.0))
        except BoxError:
            return
        b = GridBox(0.5, 0.5, 8.5, 15.5)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


class TestCoordinateMapping:
    def test_full_frame_maps_to_full_raster(self):
        p = grid_to_pixel(GridBox(0, 0, 9, 16), 1440, 2560)
        assert (p.left, p.top, p.right, p.bottom) == (0, 0, 1440, 2560)

    def test_linear_map_example(self):
        # 1 grid unit = 160 px horizontally and vertically at 1440x2560
        p = grid_to_pixel(GridBox(2, 5, 3, 10), 1440, 2560)
        assert (p.left, p.top, p.right, p.bottom) == (320, 800, 480, 1600)

    def test_half_up_rounding(self):
        # 0.5 grid units * 1 px/unit = 0.5, half-up gives 1 (banker's would give 0)
        p = grid_to_pixel(GridBox(0.5, 0.5, 8, 15), 9, 16)
        assert p.left == 1
        assert p.top == 1

    def test_degenerate_raises(self):
        with pytest.raises(DegeneratePixelBoxError):
            grid_to_pixel(GridBox(1.0, 1.0, 1.001, 2.0), 90, 160)

    def test_bad_image_dims(self):
        with pytest.raises(ValueError):
            grid_to_pixel(GridBox(0, 0, 1, 1), 0, 100)

    def test_round_trip_within_half_pixel(self):
        rng = random.Random(11)
        w, h = 1440, 2560
        tol_x = 0.5 * SPACE.width_units / w
        tol_y = 0.5 * SPACE.height_units / h
        for _ in range(500):
            left = rng.uniform(0, 8)
            top = rng.uniform(0, 15)
            box = GridBox(left, top, rng.uniform(left + 0.2, 9), rng.uniform(top + 0.2, 16))
            back = pixel_to_grid(grid_to_pixel(box, w, h), w, h)
            assert abs(back.left - box.left) <= tol_x
            assert abs(back.right - box.right) <= tol_x
            assert abs(back.top - box.top) <= tol_y
            assert abs(back.bottom - box.bottom) <= tol_y

    def test_round_trip_tolerance_value(self):
        # at 1440 px across 9 units, half a pixel is 0.003125 grid units
        assert 0.5 * SPACE.width_units / 1440 == 0.003125

    def test_pixel_box_invariants(self):
        with pytest.raises(BoxError):
            PixelBox(10, 0, 10, 5)


class TestMargins:
    def test_worked_example(self):
        m = margins(GridBox(2, 3, 5, 10))
        assert m == Margins(left_margin=2, right_margin=4, top_margin=3, bottom_margin=6)

    def test_flush_box_has_zero_margins(self):
        m = margins(GridBox(0, 0, 9, 16))
        assert (m.left_margin, m.right_margin, m.top_margin, m.bottom_margin) == (0, 0, 0, 0)


class TestGeneratePerturb:
    def test_candidate_enumeration_is_sixteen(self):
        cands = _perturb_candidates(GridBox(4, 7, 5, 9), 1.0, SPACE)
        assert len(cands) == 16

    def test_result_is_an_enumerated_candidate(self):
        box = GridBox(4, 7, 5, 9)
        valid = {
            c
            for c in _perturb_candidates(box, 1.0, SPACE)
            if c[0] >= 0 and c[1] >= 0 and c[2] <= 9 and c[3] <= 16 and c[0] < c[2] and c[1] < c[3]
        }
        valid.discard(box.as_tuple())
        rng = random.Random(3)
        for _ in range(200):
            got = generate_perturb(box, 1.0, SPACE, rng)
            assert got.as_tuple() in valid

    def test_zero_frac_is_bit_exact_identity(self):
        rng = random.Random(5)
        for _ in range(100):
            left = rng.uniform(0, 8)
            top = rng.uniform(0, 15)
            box = GridBox(left, top, rng.uniform(left + 0.1, 9), rng.uniform(top + 0.1, 16))
            got = generate_perturb(box, 0.0, SPACE, rng)
            assert got.as_tuple() == box.as_tuple()

    def test_nonzero_frac_never_returns_input(self):
        box = GridBox(2, 3, 5, 10)
        rng = random.Random(9)
        for _ in range(200):
            assert generate_perturb(box, 0.5, SPACE, rng).as_tuple() != box.as_tuple()

    def test_stays_in_bounds_with_positive_area(self):
        rng = random.Random(13)
        for _ in range(1000):
            box = random_int_box(rng)
            frac = rng.choice([0.25, 0.5, 0.75, 1.0])
            got = generate_perturb(box, frac, SPACE, rng)
            assert got.left >= 0 and got.top >= 0
            assert got.right <= 9 and got.bottom <= 16
            assert got.area > 0

    def test_offset_matches_margin_rule(self):
        box = GridBox(2, 3, 5, 10)
        m = margins(box)
        frac = 0.5
        rng = random.Random(17)
        allowed_dx = {-frac * m.left_margin, frac * m.right_margin}
        allowed_dy = {-frac * m.top_margin, frac * m.bottom_margin}
        for _ in range(100):
            got = generate_perturb(box, frac, SPACE, rng)
            assert got.left - box.left in allowed_dx
            assert got.top - box.top in allowed_dy
            assert abs(got.width - box.width) == pytest.approx(frac * box.width)
            assert abs(got.height - box.height) == pytest.approx(frac * box.height)

    def test_rejects_bad_frac(self):
        rng = random.Random(0)
        with pytest.raises(ValueError):
            generate_perturb(GridBox(1, 1, 2, 2), 1.5, SPACE, rng)
        with pytest.raises(ValueError):
            generate_perturb(GridBox(1, 1, 2, 2), -0.1, SPACE, rng)

    def test_rejects_out_of_space_input(self):
        rng = random.Random(0)
        with pytest.raises(BoxError):
            generate_perturb(GridBox(0, 0, 10, 16), 0.5, SPACE, rng)

    def test_seeded_determinism(self):
        box = GridBox(1, 2, 6, 11)
        a = [generate_perturb(box, 0.75, SPACE, random.Random(21)).as_tuple() for _ in range(5)]
        b = [generate_perturb(box, 0.75, SPACE, random.Random(21)).as_tuple() for _ in range(5)]
        assert a == b

    @settings(max_examples=200)
    @given(
        st.integers(0, 8),
        st.integers(0, 15),
        st.integers(1, 9),
        st.integers(1, 16),
        st.sampled_from([0.25, 0.5, 0.75, 1.0]),
        st.integers(0, 2**32 - 1),
    )
    def test_property_in_bounds(self, left, top, w, h, frac, seed):
        right = min(left + w, 9)
        bottom = min(top + h, 16)
        box = GridBox(left, top, right, bottom)
        got = generate_perturb(box, frac, SPACE, random.Random(seed))
        assert 0 <= got.left < got.right <= 9
        assert 0 <= got.top < got.bottom <= 16


class TestFewshotTrace:
    def test_ends_at_ground_truth(self):
        box = GridBox(2, 3, 5, 10)
        cfg = PerturbConfig(max_num_perturb=4)
        for seed in range(50):
            trace = generate_perturbed_fewshot_examples(box, cfg, SPACE, random.Random(seed))
            assert trace[-1].as_tuple() == box.as_tuple()
            assert 1 <= len(trace) <= cfg.max_num_perturb + 1

    def test_all_lengths_reachable(self):
        box = GridBox(2, 3, 5, 10)
        cfg = PerturbConfig(max_num_perturb=4)
        lengths = {
            len(generate_perturbed_fewshot_examples(box, cfg, SPACE, random.Random(s)))
            for s in range(200)
        }
        assert lengths == {1, 2, 3, 4, 5}

    def test_noise_decreases_toward_target(self):
        """Step j perturbs at fraction j/max, so each step's offset obeys that bound."""
        box = GridBox(2, 3, 5, 10)
        m = margins(box)
        cfg = PerturbConfig(max_num_perturb=4)
        for seed in range(100):
            trace = generate_perturbed_fewshot_examples(box, cfg, SPACE, random.Random(seed))
            num = len(trace) - 1
            for i, step in enumerate(trace[:-1]):
                frac = (num - i) / cfg.max_num_perturb
                dx = step.left - box.left
                dy = step.top - box.top
                assert -frac * m.left_margin - 1e-12 <= dx <= frac * m.right_margin + 1e-12
                assert -frac * m.top_margin - 1e-12 <= dy <= frac * m.bottom_margin + 1e-12
                assert abs(step.width - box.width) <= frac * box.width + 1e-12

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            PerturbConfig(max_num_perturb=0)


class TestExpandWithContext:
    def test_worked_example(self):
        got = expand_with_context(GridBox(4, 4, 6, 8), 0.25)
        assert got.as_tuple() == (3.5, 3, 6.5, 9)

    def test_clamps_at_origin(self):
        got = expand_with_context(GridBox(0, 0, 2, 2), 0.5)
        assert got.as_tuple() == (0, 0, 3, 3)

    def test_clamps_at_far_edge(self):
        got = expand_with_context(GridBox(7, 14, 9, 16), 0.5)
        assert got.as_tuple() == (6, 13, 9, 16)

    def test_zero_frac_is_identity(self):
        b = GridBox(1.25, 2.5, 3.75, 4.5)
        assert expand_with_context(b, 0.0).as_tuple() == b.as_tuple()

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            expand_with_context(GridBox(1, 1, 2, 2), -0.25)


class TestClamp:
    def test_clamp_to_space(self):
        got = clamp_to_space(GridBox(-1, -2, 10, 20), SPACE)
        assert got.as_tuple() == (0, 0, 9, 16)


class TestFormatting:
    def test_integers_render_bare(self):
        assert format_box(GridBox(2, 3, 5, 10)) == "(2, 3, 5, 10)"

    def test_trailing_zeros_stripped(self):
        assert format_coord(2.5) == "2.5"
        assert format_coord(2.50) == "2.5"
        assert format_coord(0.0) == "0"

    def test_three_decimal_limit(self):
        assert format_coord(1.23456) == "1.235"
        assert format_coord(0.003125) == "0.003"

    def test_box_surface_form(self):
        assert format_box(GridBox(0.5, 1.25, 8.875, 15.0)) == "(0.5, 1.25, 8.875, 15)"
