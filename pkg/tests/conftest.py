import os
import tempfile
import textwrap
from pathlib import Path

import pytest

# keep test runs out of the working-directory log
os.environ.setdefault("MASKLAB_LOG_FILE", str(Path(tempfile.gettempdir()) / "masklab-tests.log"))

SMALL_CONFIG = """
out_dir = "{out_dir}"

[dataset]
kind = "gaussian_blobs"
n_samples = 60
n_features = 4
n_classes = 2
seed = 3

[model]
hidden_widths = [8]
dense_units = 8

[train]
drop_rates = [0.0, 0.2, 0.5]
batch_size = 16
epochs = 2
learning_rate = 0.01
seed = 1

[[variants]]
name = "Dropout"
tag = "Dropout"

[[variants]]
name = "PerNodeBernoulli_Dynamic"
tag = "PerNodeDrop"
stir = "Bernoulli"
"""


@pytest.fixture
def write_config(tmp_path):
    """Writes a TOML config into tmp_path; `extra` is appended verbatim."""
    def _write(body=SMALL_CONFIG, extra="", name="experiment.toml"):
        path = tmp_path / name
        text = textwrap.dedent(body).format(out_dir=(tmp_path / "runs").as_posix()) + textwrap.dedent(extra)
        path.write_text(text, encoding="utf-8")
        return path
    return _write
