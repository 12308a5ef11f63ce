import numpy as np
import pytest

from cpm import workflow as W
from cpm.denoiser import reduced_config
from cpm.diffusion import TrainConfig, make_schedule
from cpm.errors import PartMissing

TINY = TrainConfig(epochs=1, batch_size=4)


@pytest.fixture(scope="module")
def demos():
    return W.build_dataset("pour", 10, 2)


def test_fit_caches_and_reloads(demos, tmp_path):
    a = W.fit("primitive", "pour", demos[:6], 2, "align", TINY, reduced_config(), cache_dir=tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert len(files) == 2 and files[0].endswith("-align.ckpt") and files[1].endswith(".timing.json")
    timing = {}
    b = W.fit("primitive", "pour", demos[:6], 2, "align", TINY, reduced_config(), cache_dir=tmp_path, timing=timing)
    assert timing["cached"] and timing["steps"] == 2 and timing["seconds"] > 0
    for k, v in a["align"].params.items():
        assert np.array_equal(v.data, b["align"].params[k].data)
    meta = b["align"].meta
    assert meta["trained_ids"] == sorted(d.id for d in demos[:6])
    assert meta["substreams"] == {"init": "init/align", "train": "train/align"}
    assert meta["schedule"]["length_scale"] == 10.0


def test_cache_key_tracks_inputs(demos, tmp_path):
    W.fit("primitive", "pour", demos[:6], 2, "align", TINY, reduced_config(), cache_dir=tmp_path)
    W.fit("primitive", "pour", demos[:5], 2, "align", TINY, reduced_config(), cache_dir=tmp_path)
    W.fit("primitive", "pour", demos[:5], 3, "align", TINY, reduced_config(), cache_dir=tmp_path)
    W.fit("primitive", "pour", demos[:5], 3, "align", TINY, reduced_config(), make_schedule(length_scale=1.0), cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.ckpt"))) == 4


def test_fit_is_deterministic(demos):
    a = W.fit("primitive", "pour", demos[:4], 5, "tilt", TINY, reduced_config())
    b = W.fit("primitive", "pour", demos[:4], 5, "tilt", TINY, reduced_config())
    assert all(np.array_equal(v.data, b["tilt"].params[k].data) for k, v in a["tilt"].params.items())


def test_model_sets(demos):
    joint = W.fit("train-time", "pour", demos[:4], 1, train_cfg=TINY, model_cfg=reduced_config())
    assert sorted(joint) == ["align", "facing-up", "tilt"]
    assert all(m.meta["kind"] == "train-time" for m in joint.values())
    mono = W.fit("monolithic", "pour", demos[:4], 1, train_cfg=TINY, model_cfg=reduced_config())
    assert list(mono) == ["whole"]


def test_primitive_skips_records_without_parts(demos, caplog):
    plain = [d for d in demos if not d.function.has_part("handle")]
    handled = [d for d in demos if d.function.has_part("handle")]
    assert plain and handled
    models = W.fit("primitive", "pour", plain + handled, 1, "facing-up", TINY, reduced_config())
    assert set(models["facing-up"].meta["trained_ids"]) == {d.id for d in handled}
    assert "lack parts" in caplog.text
    with pytest.raises(PartMissing):
        W.fit("primitive", "pour", plain, 1, "facing-up", TINY, reduced_config())
