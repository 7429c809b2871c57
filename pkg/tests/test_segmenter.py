"""Whole-slide segmentation: label maps, overlays, tissue proportions."""

import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import build_slide
from spider.dataset import ContextSpec, context_refs
from spider.embedder import Embedder, EmbedderConfig
from spider.model import HeadConfig, head_forward, head_init
from spider.segmenter import (
    BACKGROUND,
    LEGEND_ROW_HEIGHT,
    LabelMap,
    default_palette,
    labels_payload,
    proportions,
    render_overlay,
    save_labels,
    segment_slide,
)
from spider.slide import read_patch

DIM = 64
CLASSES = ["tumor", "stroma", "mucosa"]


@pytest.fixture(scope="module")
def embedder():
    return Embedder(EmbedderConfig(backend="mock", dim=DIM))


@pytest.fixture(scope="module")
def model():
    config = HeadConfig(
        embed_dim=DIM, hidden=16, intermediate=16, num_classes=3,
        dropout_hidden=0.0, dropout_attn=0.0, dropout_head=0.0,
    )
    return head_init(config, seed=7)


@pytest.fixture(scope="module")
def mixed_slide():
    return build_slide(
        "mix",
        [
            ["ribbons", "specks", "white"],
            ["specks", "ribbons", "white"],
            ["white", "white", "white"],
        ],
    )


def label_map_from(cells, k=3):
    cells = np.asarray(cells, dtype=np.int16)
    conf = np.where(cells == BACKGROUND, 0.0, 0.5).astype(np.float32)
    return LabelMap("toy", 224, CLASSES[:k], cells, conf)


class TestSegmentSlide:
    def test_all_white_slide_is_background(self, white_slide, model, embedder):
        label_map = segment_slide(white_slide, model, CLASSES, embedder)
        assert label_map.cells.shape == (2, 2)
        assert (label_map.cells == BACKGROUND).all()
        assert (label_map.confidences == 0.0).all()
        report = proportions(label_map)
        assert report.tissue_patch_count == 0
        assert report.background_patch_count == 4
        assert all(v == 0.0 for v in report.fractions.values())

    def test_tissue_and_background_cells(self, mixed_slide, model, embedder):
        label_map = segment_slide(mixed_slide, model, CLASSES, embedder)
        assert label_map.cells.shape == (3, 3)
        tissue_mask = label_map.cells != BACKGROUND
        assert tissue_mask.tolist() == [
            [True, True, False],
            [True, True, False],
            [False, False, False],
        ]
        assert (label_map.confidences[tissue_mask] > 0).all()
        assert (label_map.confidences[~tissue_mask] == 0).all()

    def test_full_tissue_grid_classifies_all_cells(self, model, embedder):
        slide = build_slide("allrib", [["ribbons"] * 5 for _ in range(5)])
        label_map = segment_slide(slide, model, CLASSES, embedder, ContextSpec(grid=5))
        assert label_map.cells.shape == (5, 5)
        assert (label_map.cells != BACKGROUND).all()

    def test_repeat_runs_identical(self, mixed_slide, model, embedder):
        a = segment_slide(mixed_slide, model, CLASSES, embedder)
        b = segment_slide(mixed_slide, model, CLASSES, embedder)
        assert (a.cells == b.cells).all()
        assert (a.confidences == b.confidences).all()

    def test_cell_matches_standalone_classification(self, mixed_slide, model, embedder):
        spec = ContextSpec(grid=3)
        label_map = segment_slide(mixed_slide, model, CLASSES, embedder, spec)
        from spider.slide import PatchRef

        central = PatchRef(slide_id="mix", x=224, y=0)
        blocks = [
            read_patch(mixed_slide, ref, pad_value=spec.pad_value)
            for ref in context_refs(central, spec)
        ]
        tokens = np.stack(embedder.embed_blocks(blocks))
        logits, _ = head_forward(model, tokens)
        assert label_map.cells[0, 1] == int(np.argmax(logits))

    def test_dim_mismatch(self, mixed_slide, model):
        wrong = Embedder(EmbedderConfig(backend="mock", dim=32))
        with pytest.raises(ValueError, match="does not match checkpoint embed_dim"):
            segment_slide(mixed_slide, model, CLASSES, wrong)

    def test_class_count_mismatch(self, mixed_slide, model, embedder):
        with pytest.raises(ValueError, match="num_classes"):
            segment_slide(mixed_slide, model, CLASSES + ["extra"], embedder)

    def test_slide_smaller_than_patch(self, model, embedder):
        tiny = build_slide("dot", [["ribbons"]], size=100)
        label_map = segment_slide(tiny, model, CLASSES, embedder)
        assert label_map.cells.shape == (0, 0)
        assert proportions(label_map).tissue_patch_count == 0


class TestLabelMap:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="2-D shape"):
            LabelMap("x", 224, CLASSES, np.zeros((2, 2)), np.zeros((2, 3)))

    def test_tissue_confidence_range(self):
        cells = np.array([[0, BACKGROUND]])
        with pytest.raises(ValueError, match=r"\(0, 1\]"):
            LabelMap("x", 224, CLASSES, cells, np.array([[0.0, 0.0]]))
        with pytest.raises(ValueError, match=r"\(0, 1\]"):
            LabelMap("x", 224, CLASSES, cells, np.array([[1.5, 0.0]]))
        ok = LabelMap("x", 224, CLASSES, cells, np.array([[1.0, 0.0]]))
        assert ok.rows == 1 and ok.cols == 2


class TestOverlay:
    def test_alpha_zero_passes_slide_through(self, mixed_slide, model, embedder):
        label_map = segment_slide(mixed_slide, model, CLASSES, embedder)
        png = render_overlay(mixed_slide, label_map, alpha=0.0)
        img = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
        h = mixed_slide.height
        assert img.shape == (h + 3 * LEGEND_ROW_HEIGHT, mixed_slide.width, 3)
        assert (img[:h] == mixed_slide.pixels).all()

    def test_full_alpha_paints_solid_class_color(self, mixed_slide):
        cells = np.full((3, 3), BACKGROUND, dtype=np.int16)
        cells[0, 0] = 1
        conf = np.where(cells == BACKGROUND, 0, 0.9).astype(np.float32)
        label_map = LabelMap("mix", 224, CLASSES, cells, conf)
        palette = {"tumor": (255, 0, 0), "stroma": (0, 200, 0), "mucosa": (0, 0, 255)}
        png = render_overlay(mixed_slide, label_map, palette, alpha=1.0)
        img = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
        assert (img[:224, :224] == (0, 200, 0)).all()
        assert (img[:224, 224:448] == mixed_slide.pixels[:224, 224:448]).all()

    def test_missing_palette_entry(self, mixed_slide):
        label_map = label_map_from(np.zeros((3, 3)))
        with pytest.raises(ValueError, match="palette missing entry.*mucosa"):
            render_overlay(mixed_slide, label_map, {"tumor": (1, 2, 3), "stroma": (4, 5, 6)})

    def test_alpha_out_of_range(self, mixed_slide):
        label_map = label_map_from(np.zeros((3, 3)))
        with pytest.raises(ValueError, match="alpha"):
            render_overlay(mixed_slide, label_map, alpha=1.2)

    def test_rendering_does_not_mutate_inputs(self, mixed_slide):
        label_map = label_map_from([[0, 1, 2], [2, 1, 0], [BACKGROUND] * 3])
        cells_before = label_map.cells.copy()
        pixels_before = mixed_slide.pixels.copy()
        render_overlay(mixed_slide, label_map, alpha=0.5)
        assert (label_map.cells == cells_before).all()
        assert (mixed_slide.pixels == pixels_before).all()

    def test_default_palette_distinct_and_stable(self):
        palette = default_palette(CLASSES)
        assert len(set(palette.values())) == 3
        assert palette == default_palette(CLASSES)

    def test_legend_height_scales_with_classes(self, mixed_slide):
        for k in (1, 3):
            label_map = label_map_from(np.full((3, 3), BACKGROUND), k=k)
            png = render_overlay(mixed_slide, label_map, alpha=0.3)
            img = Image.open(io.BytesIO(png))
            assert img.size == (
                mixed_slide.width,
                mixed_slide.height + LEGEND_ROW_HEIGHT * k,
            )


class TestProportions:
    def test_worked_example(self):
        report = proportions(label_map_from([[0, 0], [1, 2]]))
        assert report.fractions == {"tumor": 0.5, "stroma": 0.25, "mucosa": 0.25}
        assert report.tissue_patch_count == 4
        assert report.background_patch_count == 0

    def test_background_excluded_from_denominator(self):
        report = proportions(label_map_from([[0, BACKGROUND], [BACKGROUND, BACKGROUND]]))
        assert report.fractions["tumor"] == 1.0
        assert report.tissue_patch_count == 1
        assert report.background_patch_count == 3

    def test_all_background(self):
        report = proportions(label_map_from(np.full((4, 4), BACKGROUND)))
        assert all(v == 0.0 for v in report.fractions.values())
        assert report.tissue_patch_count == 0
        assert report.background_patch_count == 16

    @given(
        st.lists(
            st.lists(st.integers(-1, 2), min_size=3, max_size=3),
            min_size=2, max_size=6,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_fractions_sum_to_one(self, rows):
        label_map = label_map_from(rows)
        report = proportions(label_map)
        total = sum(report.fractions.values())
        if report.tissue_patch_count:
            assert abs(total - 1.0) <= 1e-9
        else:
            assert total == 0.0
        assert report.tissue_patch_count + report.background_patch_count == label_map.cells.size

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        cells = rng.integers(-1, 3, size=(5, 4))
        shuffled = cells.ravel().copy()
        rng.shuffle(shuffled)
        a = proportions(label_map_from(cells))
        b = proportions(label_map_from(shuffled.reshape(4, 5)))
        assert a.fractions == b.fractions
        assert a.tissue_patch_count == b.tissue_patch_count


class TestLabelsFile:
    def test_payload_shape(self):
        label_map = label_map_from([[0, BACKGROUND], [2, 1]])
        payload = labels_payload(label_map)
        assert payload["grid"] == [2, 2]
        assert payload["classes"] == CLASSES
        assert payload["cells"] == [[0, -1], [2, 1]]
        assert payload["confidences"][0][1] == 0.0
        assert payload["confidences"][1][0] == 0.5

    def test_confidences_rounded_to_6(self):
        cells = np.array([[0]])
        conf = np.array([[0.1234567891]], dtype=np.float32)
        payload = labels_payload(LabelMap("x", 224, CLASSES, cells, conf))
        assert payload["confidences"][0][0] == round(float(conf[0, 0]), 6)

    def test_save_round_trips(self, tmp_path):
        label_map = label_map_from([[1, BACKGROUND]])
        path = tmp_path / "labels.json"
        save_labels(label_map, path)
        loaded = json.loads(path.read_text())
        assert loaded == labels_payload(label_map)
