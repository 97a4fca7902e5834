import numpy as np

from dronelab.plotting import log_trajectories, plot_race, plot_sdf_slice
from dronelab.tracks import straight_track

PNG = b"\x89PNG\r\n\x1a\n"


def test_log_trajectories_skips_comments_and_bad_lines():
    text = "\n".join([
        "# drl-log v1 track=t tier=1 seed=0",
        "0.005 a 1 2 3 1 0 0 0 0 0 0",
        "0.005 b 4 5 6 1 0 0 0 0 0 0",
        "0.010 a x 2 3 1 0 0 0 0 0 0",
        "0.010 a 1 2",
        "",
        "0.015 a 7 8 9 1 0 0 0 0 0 0",
    ])
    paths = log_trajectories(text)
    assert sorted(paths) == ["a", "b"]
    assert np.array_equal(paths["a"], [[0.005, 1, 2, 3], [0.015, 7, 8, 9]])
    assert paths["b"].shape == (1, 4)


def test_race_figure_is_byte_stable(tmp_path):
    track = straight_track(length=20.0, n_gates=2)
    paths = {"a": np.column_stack([np.linspace(0, 1, 5), np.linspace(-4, 24, 5), np.zeros(5), np.full(5, 5.0)])}
    plot_race(track, paths, tmp_path / "a.png")
    plot_race(track, paths, tmp_path / "b.png")
    a = (tmp_path / "a.png").read_bytes()
    assert a.startswith(PNG) and a == (tmp_path / "b.png").read_bytes()


def test_sdf_slice_writes_png(tmp_path):
    d = np.linspace(-3, 3, 8 * 6 * 4).reshape(8, 6, 4)
    out = plot_sdf_slice(d, np.zeros(3), 0.5, tmp_path / "s.png")
    assert open(out, "rb").read(8) == PNG
