import numpy as np
import pytest

from lidar_ood import pcio, synth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    """A small synthetic ID dataset plus a two-class OOD database, on disk."""
    root = tmp_path_factory.mktemp("world")
    ds = synth.make_dataset(24, seed=1)
    pcio.save_dataset(ds, root / "id")
    objs = synth.make_ood_database(5, seed=2)
    pcio.write_ood_db([o.record for o in objs], root / "ood", [o.cloud for o in objs])
    return root


def write_spec(root, out_name="spec.ini", **extra):
    """Experiment spec for the ``world`` fixture with a small flow budget."""
    lines = {
        "experiment": {"dataset": "id/manifest.txt", "ood_db": "ood", "repeats": "1", "seed": "7",
                       "methods": "max_softmax,mahalanobis,ocsvm,flow", "layers": "backbone,logits",
                       "balanced_repeats": "3"},
        "inject": {"zeta_max": "8", "gamma_max": "20"},
        "flow": {"steps": "60", "hidden": "16", "n_layers": "2"},
    }
    for key, value in extra.items():
        section, name = key.split("__")
        lines.setdefault(section, {})[name] = str(value)
    text = "".join(f"[{s}]\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()) + "\n"
                   for s, kv in lines.items())
    path = root / out_name
    path.write_text(text)
    return path
