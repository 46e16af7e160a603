import pandas as pd

from smarc.config import DESK_ARCH
from smarc.evaluate import evaluate
from smarc.model import build_model
from smarc.synth import synth_textures


def test_report_does_not_depend_on_worker_count(monkeypatch):
    data = synth_textures(3, 32, seed=8, visible_fraction=0.25)
    model = build_model(DESK_ARCH, seed=8)

    monkeypatch.setenv("SMARC_NUM_THREADS", "1")
    serial = evaluate(model, data, batch_size=5, verbose=False)
    monkeypatch.setenv("SMARC_NUM_THREADS", "8")
    threaded = evaluate(model, data, batch_size=5, verbose=False)

    pd.testing.assert_frame_equal(serial.per_image, threaded.per_image, check_exact=True)

    def untimed(report):
        return [line for line in report.to_text().splitlines() if not line.startswith(("s_per_img:", "total_s:"))]

    assert untimed(serial) == untimed(threaded)
