import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from arbinpaint.adversarial import ExtractorConfig, FeaturePyramid
from arbinpaint.core_types import load_image, save_mask
from arbinpaint.dataset import SplitSpec, build_realworld_split, materialize_split
from arbinpaint.errors import CapabilityError, ConfigError, ValidationError
from arbinpaint.evaluation import (
    AdapterKind,
    AdapterMode,
    EvalConfig,
    EvalReport,
    EvalRow,
    GeneratorModel,
    InpaintModel,
    MaskCorpus,
    infer_adapter,
    lpips,
    masked_l1,
    masked_psnr,
    pad_geometry,
    psnr,
    resize_mask,
    run_experiment,
    ssim,
)
from arbinpaint.generator import build_generator
from arbinpaint.maskgen import MaskSpec, write_mask_corpus
from tests.utils import create_generator_config, create_image, create_mask, write_images
import utils.settings as settings_mod

GOLDEN = Path(__file__).parent / "golden" / "lpips_desk.json"


class MeanFill:
    """Fills every pixel with the mean known colour and records the shapes it was given."""

    square_only = False

    def __init__(self):
        self.seen: list[tuple[int, int]] = []

    def __call__(self, img, mask):
        self.seen.append(img.shape[:2])
        known = img[mask == 0]
        colour = known.mean(axis=0) if len(known) else np.full(3, 0.5)
        return np.broadcast_to(colour, img.shape).astype(np.float32).copy()


class SquareOnly(MeanFill):
    square_only = True


def _extractor() -> FeaturePyramid:
    return FeaturePyramid(ExtractorConfig(channels=[8, 16]))


# metrics


def test_psnr():
    a = create_image(32, 32) * 0.9
    assert psnr(a, a) == math.inf
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-4)

    rng = np.random.default_rng(0)
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert psnr(x, y) == pytest.approx(10 * math.log10(1 / np.mean((x - y) ** 2)), abs=1e-9)


def test_metrics_need_matching_shapes():
    with pytest.raises(ValidationError):
        psnr(create_image(16, 16), create_image(16, 17))
    with pytest.raises(ValidationError):
        ssim(create_image(16, 16), create_image(17, 16))


def test_ssim_reference_points():
    a = create_image(32, 48)
    assert ssim(a, a) == pytest.approx(1.0)
    flat = np.full((16, 16, 3), 0.3, dtype=np.float32)
    assert ssim(flat, flat.copy()) == pytest.approx(1.0)

    noise = np.random.default_rng(1).random((32, 32, 3))
    assert ssim(noise, 1 - noise) < 0


def test_ssim_symmetries():
    rng = np.random.default_rng(2)
    a = rng.random((24, 24, 3))
    # the luminance term is the only part not invariant under inversion
    assert ssim(a, 1 - a) == pytest.approx(ssim(1 - a, a), abs=1e-12)
    b = rng.random((24, 24, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(1 - a, 1 - b), abs=1e-2)


def test_ssim_needs_full_window():
    with pytest.raises(ValidationError):
        ssim(np.zeros((10, 32, 3)), np.zeros((10, 32, 3)))


def test_lpips_identity_and_symmetry():
    extractor = _extractor()
    a, b = create_image(32, 32, seed=1), create_image(32, 32, seed=2)
    assert lpips(a, a, extractor) == 0.0
    assert lpips(a, b, extractor) == pytest.approx(lpips(b, a, extractor), rel=1e-6)


def test_lpips_grows_with_distortion():
    extractor = _extractor()
    a = create_image(32, 32, seed=3)
    noise = np.random.default_rng(3).normal(size=a.shape).astype(np.float32)
    distances = [lpips(a, np.clip(a + s * noise, 0, 1), extractor) for s in (0.02, 0.1, 0.3)]
    assert distances[0] < distances[1] < distances[2]


def test_lpips_needs_extractor():
    with pytest.raises(ConfigError):
        lpips(create_image(16, 16), create_image(16, 16), None)


def test_lpips_golden_value():
    assert GOLDEN.exists(), f"missing golden file {GOLDEN}"
    golden = json.loads(GOLDEN.read_text())
    img = np.zeros((16, 16, 3), dtype=np.float32)
    for (top, left), colour in zip(((0, 0), (0, 8), (8, 0), (8, 8)), golden["quadrants"], strict=True):
        img[top : top + 8, left : left + 8] = colour
    reference = np.broadcast_to(np.asarray(golden["reference"], dtype=np.float32), img.shape)

    extractor = FeaturePyramid(ExtractorConfig(**golden["extractor"]))
    assert lpips(img, reference, extractor) == pytest.approx(golden["lpips"], rel=1e-5)


def test_masked_metrics():
    a = create_image(16, 16)
    b = a.copy()
    mask = create_mask(16, 16)
    b[mask > 0] = np.clip(b[mask > 0] + 0.1, 0, 1)

    assert masked_psnr(a, a, mask) == math.inf
    assert masked_psnr(a, a, np.zeros_like(mask)) == math.inf
    assert masked_l1(a, b, mask) > 0
    assert masked_l1(a, b, np.zeros_like(mask)) == 0.0


# adapters


def test_pad_geometry():
    assert pad_geometry(384, 683, 512) == (288, 512, 112, 0)
    assert pad_geometry(512, 512, 512) == (512, 512, 0, 0)
    assert pad_geometry(1024, 768, 512) == (512, 384, 0, 64)


@pytest.mark.parametrize("kind", list(AdapterKind))
def test_adapters_keep_dims_and_known_pixels(kind):
    img = create_image(96, 160, seed=4)
    mask = create_mask(96, 160)

    out = infer_adapter(img, mask, MeanFill(), AdapterMode(kind=kind, train_size=64))

    assert out.shape == img.shape
    assert np.array_equal(out[mask == 0], img[mask == 0])


def test_resize_adapter_feeds_train_size():
    model = MeanFill()
    infer_adapter(create_image(96, 72), create_mask(96, 72), model, AdapterMode(kind="resize", train_size=64))
    assert model.seen == [(64, 64)]


def test_pad_adapter_feeds_train_size_square():
    model = MeanFill()
    mode = AdapterMode(kind=AdapterKind.PAD_EDGE, train_size=64)
    infer_adapter(create_image(48, 85), create_mask(48, 85), model, mode)
    assert model.seen == [(64, 64)]


def test_capability_matrix():
    img, mask = create_image(48, 64), create_mask(48, 64)
    with pytest.raises(CapabilityError):
        infer_adapter(img, mask, SquareOnly(), AdapterMode(kind=AdapterKind.DIRECT))
    for kind in (AdapterKind.RESIZE, AdapterKind.PAD_CONSTANT, AdapterKind.PAD_EDGE):
        infer_adapter(img, mask, SquareOnly(), AdapterMode(kind=kind, train_size=32))

    model = GeneratorModel(build_generator(create_generator_config()))
    assert isinstance(model, InpaintModel)
    for h, w in ((48, 64), (64, 48), (40, 40)):
        out = infer_adapter(create_image(h, w), create_mask(h, w), model, AdapterMode())
        assert out.shape == (h, w, 3)


def test_adapter_rejects_wrong_output():
    class Shrinks(MeanFill):
        def __call__(self, img, mask):
            return super().__call__(img, mask)[:-1]

    with pytest.raises(ValidationError):
        infer_adapter(create_image(16, 16), create_mask(16, 16), Shrinks(), AdapterMode())


def test_resize_mask_stays_binary():
    mask = resize_mask(create_mask(37, 61), 64, 64)
    assert mask.shape == (64, 64)
    assert np.isin(mask, (0.0, 1.0)).all()


def test_resize_mask_keeps_thin_strokes():
    mask = np.zeros((96, 72), dtype=np.float32)
    mask[:, 30] = 1.0
    small = resize_mask(mask, 32, 32)
    assert np.isin(small, (0.0, 1.0)).all()
    assert small.max(axis=1).all()


@pytest.mark.parametrize("kind", list(AdapterKind))
def test_adapters_hide_hole_content(kind):
    mask = create_mask(96, 72)
    mask[:, 30] = 1.0
    # holes are white, known pixels black; an identity model can only echo what it is shown
    img = np.repeat(mask[..., None], 3, axis=-1)

    class Echo(MeanFill):
        def __call__(self, img, mask):
            return img.copy()

    out = infer_adapter(img, mask, Echo(), AdapterMode(kind=kind, train_size=32))
    assert out[mask > 0].max() == 0.0


# reports


def test_report_caps_infinite_psnr_in_table_only():
    report = EvalReport(rows=[EvalRow(setting="1:1/direct", psnr=math.inf, ssim=1.0, lpips=0.0, n_images=1)])
    assert "99.000" in report.to_table()
    (record,) = report.to_records()
    assert '"psnr":Infinity' in record
    assert json.loads(record)["psnr"] == math.inf


# experiment


def _toy_split(tmp_path: Path, n: int = 10) -> Path:
    write_images(tmp_path / "src", n, 48, 60, seed=20)
    manifest = build_realworld_split(tmp_path / "src", SplitSpec(name="4:5", target_h=48, target_w=60), mask_seed=1)
    materialize_split(manifest, tmp_path / "split")
    return tmp_path / "split" / "manifest.txt"


@pytest.mark.timeout(120, method="thread")
def test_run_experiment_is_deterministic_and_dumps_outputs(tmp_path):
    split = _toy_split(tmp_path)
    model = GeneratorModel(build_generator(create_generator_config(), seed=2))
    adapters = [AdapterKind.DIRECT, AdapterKind.RESIZE]

    first = run_experiment(
        EvalConfig(splits=[split], adapters=adapters, train_size=32, out_dir=tmp_path / "a"), model, _extractor()
    )
    second = run_experiment(
        EvalConfig(splits=[split], adapters=adapters, train_size=32, out_dir=tmp_path / "b"), model, _extractor()
    )

    assert [r.setting for r in first.rows] == ["split/direct", "split/resize"]
    assert first.rows == second.rows
    assert first.rows[0].n_images == 10
    assert (tmp_path / "a" / "report.txt").exists()

    sources = sorted((tmp_path / "split").glob("*.png"))
    recomputed = [psnr(load_image(tmp_path / "a" / "split" / "direct" / p.name), load_image(p)) for p in sources]
    assert float(np.mean(recomputed)) == pytest.approx(first.rows[0].psnr, abs=1e-6)


@pytest.mark.timeout(60, method="thread")
def test_run_experiment_with_mask_corpus(tmp_path):
    split = _toy_split(tmp_path, n=3)
    write_mask_corpus(tmp_path / "masks", 2, 32, 32, MaskSpec(), seed=0)
    cfg = EvalConfig(splits=[split], masks=tmp_path / "masks", adapters=[AdapterKind.DIRECT], masked_metrics=True)

    report = run_experiment(cfg, MeanFill(), _extractor())

    (row,) = report.rows
    assert row.n_images == 3
    assert row.masked_l1 is not None and row.masked_l1 > 0
    assert MaskCorpus(tmp_path / "masks").mask_for(5, 48, 60).shape == (48, 60)


def test_run_experiment_lists_missing_artifacts(tmp_path):
    cfg = EvalConfig(splits=[tmp_path / "nope" / "manifest.txt"], masks=tmp_path / "masks")
    with pytest.raises(FileNotFoundError) as info:
        run_experiment(cfg, MeanFill(), _extractor())
    assert "nope" in str(info.value) and "masks" in str(info.value)


def test_run_experiment_collects_failures_in_prod(tmp_path, monkeypatch):
    split = _toy_split(tmp_path, n=2)
    bad = np.zeros((10, 10), dtype=np.float32)
    save_mask(bad, tmp_path / "bad.png")
    lines = split.read_text().splitlines()
    # point the first entry at a mask of the wrong dims
    fields = lines[1].split("\t")
    fields[1] = str(tmp_path / "bad.png")
    split.write_text("\n".join([lines[0], "\t".join(fields), *lines[2:]]) + "\n")
    cfg = EvalConfig(splits=[split], adapters=[AdapterKind.DIRECT])

    with pytest.raises(ValidationError):
        run_experiment(cfg, MeanFill(), _extractor())

    monkeypatch.setattr(settings_mod.settings, "mode", settings_mod.Modes.PROD)
    report = run_experiment(cfg, MeanFill(), _extractor())
    assert len(report.failures) == 1
    assert report.rows[0].n_images == 1


def test_generator_model_returns_raw_prediction():
    model = GeneratorModel(build_generator(create_generator_config()))
    with torch.no_grad():
        out = model(create_image(32, 32), create_mask(32, 32))
    assert out.shape == (32, 32, 3)
