"""Smoke test for the semedit_py extension.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/semedit_py-*.whl
"""

import sys
import tempfile
from pathlib import Path

import semedit_py as se


def main() -> int:
    assert se.roi_names() == ["hair", "skin", "nose", "eyes", "lips_mouth"]

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert se.make_synthetic(str(tmp / "data"), 4, image_size=32, seed=1) == 4
        losses = se.train("smn", str(tmp / "data"), str(tmp / "m" / "smn"), 2, batch_size=2, image_size=32, base_channels=8)
        assert len(losses) == 2 and all(l >= 0 for l in losses)
        try:
            se.train("smpn", str(tmp / "data"), str(tmp / "m" / "smpn"), 1, batch_size=2)
        except ValueError as e:
            assert "SMPN requires SMN weights" in str(e)
        else:
            raise AssertionError("smpn without init should fail")
        se.train("smpn", str(tmp / "data"), str(tmp / "m" / "smpn"), 1, batch_size=2, init=str(tmp / "m" / "smn"))

        editor = se.Editor.load(str(tmp / "m"))
        assert editor.image_size == 32
        x = se.Image.read(str(next((tmp / "data" / "images").glob("*.png"))))
        assert x.shape == (32, 32, 3)

        a = editor.edit(x, "hair", mu=1.0, seed=3)
        b = editor.edit(x, "hair", mu=1.0, seed=3)
        assert a.edited.to_png() == b.edited.to_png()
        assert (a.encoder_calls, a.decoder_calls) == (2, 2)
        assert len(a.mask) == 32 * 32 and len(a.matte) == 32 * 32

        assert a.locality_leakage(x) <= 1e-6

        s = editor.swap(x, x, "skin")
        assert (s.encoder_calls, s.decoder_calls) == (3, 2)
        assert editor.structure_edit(x, "nose", mu=0.0).shape == (32, 32, 3)
        masks = editor.segment(x)
        assert sorted(masks) == sorted(se.roi_names())

        try:
            editor.edit(x, "ears")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown region should fail")

        rt = se.Image.from_png(x.to_png())
        assert rt.mean_abs_diff(x) == 0.0

    print("python smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
