import numpy as np
import pytest
import torch
from scipy import ndimage

from ptvton.config import toy_config
from ptvton.data import CatalogEntry, load_manifest
from ptvton.network import Generator
from ptvton.pipeline import StageError, UserInput, run_transfer, texture_stage, tps_between
from ptvton.pose import Pose
from ptvton.texture import SegMask, TextureTranslator, TransferMethod

from .conftest import random_pose

SMALL = {"model.base_channels": 4, "model.n_blocks": 2, "model.stem_kernel": 3}


@pytest.fixture(scope="module")
def cfg():
    return toy_config(SMALL)


@pytest.fixture(scope="module")
def generator(cfg):
    torch.manual_seed(0)
    return Generator(cfg.model.arch()).eval()


@pytest.fixture(scope="module")
def world(synthetic_root):
    man = load_manifest(synthetic_root / "data" / "manifest.json")
    catalog = [man.load_entry(r) for r in man.split("catalog")]
    users = [man.load_entry(r) for r in man.split("test")]
    return catalog, users


def as_user(e):
    return UserInput(e.image, e.pose, e.seg_mask)


def test_run_transfer_records_everything(world, generator, cfg):
    catalog, users = world
    res = run_transfer(as_user(users[0]), "cg000", catalog, generator, cfg)
    assert res.selected.garment_id == "cg000"
    assert set(res.timings) == {"select", "pose_transfer", "tps", "texture_transfer"}
    assert res.final.shape == res.posed_model.shape == res.warped_model.shape == (256, 192, 3)
    assert res.final.min() >= 0 and res.final.max() <= 1
    assert res.tps.fitted and res.tps.max_control_residual < 1e-6
    assert res.config_digest == cfg.digest()
    s = res.summary()
    assert s["selected"] == res.selected.record_id and "timings" in s


@pytest.mark.parametrize("ui", range(6))
@pytest.mark.parametrize("garment", ["cg000", "cg001"])
def test_copy_paste_conservation(world, generator, cfg, ui, garment):
    catalog, users = world
    res = run_transfer(as_user(users[ui]), garment, catalog, generator, cfg)
    assert res.method_used is TransferMethod.COPY_PASTE
    far = ndimage.distance_transform_edt(~res.altered_region) > cfg.composite.radius
    assert np.array_equal(res.final[far], users[ui].image[far])


def test_stage_c_replay(world, generator, cfg):
    catalog, users = world
    user = as_user(users[1])
    res = run_transfer(user, "cg001", catalog, generator, cfg)
    again, *_ = texture_stage(user, res.posed_model, res.garment_mask, cfg)
    assert np.array_equal(again, res.final)


def test_deterministic(world, generator, cfg):
    catalog, users = world
    a = run_transfer(as_user(users[2]), "cg000", catalog, generator, cfg)
    b = run_transfer(as_user(users[2]), "cg000", catalog, generator, cfg)
    assert np.array_equal(a.final, b.final)


def test_identity_with_empty_garment_returns_user(world, generator, cfg):
    catalog, _ = world
    e = catalog[0]
    bare = SegMask(np.where(e.seg_mask.garment, 0, e.seg_mask.labels).astype(np.uint8))
    entry = CatalogEntry(e.image, e.pose, bare, e.garment_id, e.model_id, "bare")
    res = run_transfer(UserInput(e.image, e.pose, e.seg_mask), e.garment_id, [entry], generator, cfg)
    assert np.array_equal(res.final, e.image)
    assert any("no garment region" in w for w in res.warnings)


def test_low_oks_warns_not_aborts(world, generator):
    catalog, users = world
    cfg = toy_config(dict(SMALL, **{"transfer.oks_floor": 1.01}))
    res = run_transfer(as_user(users[0]), "cg000", catalog, generator, cfg)
    assert any("below floor" in w for w in res.warnings)


def test_stage_errors_name_the_stage(world, generator, cfg):
    catalog, users = world
    with pytest.raises(StageError) as info:
        run_transfer(as_user(users[0]), "no-such-garment", catalog, generator, cfg)
    assert info.value.stage == "select"
    assert len(info.value.inputs_digest) == 12


def test_translation_path_and_fallback(world, generator):
    catalog, users = world
    cfg = toy_config(dict(SMALL, **{"transfer.occlusion_threshold": -1.0}))
    res = run_transfer(as_user(users[0]), "cg000", catalog, generator, cfg)
    assert res.method.method is TransferMethod.TEXTURE_TRANSLATION
    assert res.method_used is TransferMethod.COPY_PASTE
    assert any("no texture checkpoint" in w for w in res.warnings)
    torch.manual_seed(0)
    net = TextureTranslator(4).eval()
    res = run_transfer(as_user(users[0]), "cg000", catalog, generator, cfg, net)
    assert res.method_used is TransferMethod.TEXTURE_TRANSLATION
    far = ndimage.distance_transform_edt(~res.altered_region) > cfg.composite.radius
    assert np.array_equal(res.final[far], users[0].image[far])


def test_tps_between_degenerate(rng):
    a = np.array(random_pose(rng, p_hidden=0).keypoints)
    a[2:, 2] = 0
    t, diag = tps_between(Pose(a), random_pose(rng, p_hidden=0))
    assert t is None and not diag.fitted and "at least 3" in diag.note
