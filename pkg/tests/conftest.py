import numpy as np
import pytest

from dcq.field import (
    Manifest,
    ManifestField,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    save_manifest,
    save_raw,
)
from dcq.pipeline import BlockSpec, Dataset, build_labels, eb_grid


def make_dataset_dir(outdir, dims=(32, 32, 32), timesteps=4, seed=11, fields=1,
                     noise=0.01, drift=0.03):
    outdir.mkdir(parents=True, exist_ok=True)
    mfields = []
    for fi in range(fields):
        fseed = int(np.random.SeedSequence([seed, 0xF1E1D, fi]).generate_state(1, np.uint64)[0])
        spec = SyntheticSpec(dims=dims, seed=fseed, noise_amplitude=noise, drift=drift)
        name = f"field{fi}"
        entries = []
        for ts in range(timesteps):
            vol = generate_synthetic(spec, ts, field_name=name)
            rel = f"{name}_t{ts}.f32"
            save_raw(vol, outdir / rel)
            entries.append((ts, rel))
        mfields.append(ManifestField(name=name, timesteps=entries))
    manifest = Manifest(name="test", dims=dims, fields=mfields, base_dir=outdir)
    save_manifest(manifest, outdir / "manifest.json")
    return outdir / "manifest.json"


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    path = make_dataset_dir(tmp_path_factory.mktemp("tinyds"))
    return load_manifest(path)


@pytest.fixture(scope="session")
def tiny_block_spec():
    return BlockSpec(dims=(16, 16, 16), per_volume=4)


@pytest.fixture(scope="session")
def tiny_labels(tiny_manifest, tiny_block_spec):
    grid = eb_grid(1e-4, 1e-2, 6)
    return build_labels(tiny_manifest, ["pred-eb", "xform-eb"], grid, tiny_block_spec,
                        seed=11, workers=1)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_manifest, tiny_block_spec):
    return Dataset(tiny_manifest, tiny_block_spec, seed=11)
