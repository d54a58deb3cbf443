"""Smoke test for the mgmlab_py extension.

Uses an installed module if there is one; otherwise loads the library
built by `cargo build -p mgmlab-python --features extension-module`.
"""

import importlib.machinery
import importlib.util
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import mgmlab_py

        return mgmlab_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libmgmlab_py.so", "libmgmlab_py.dylib", "mgmlab_py.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                loader = importlib.machinery.ExtensionFileLoader("mgmlab_py", str(lib))
                spec = importlib.util.spec_from_file_location("mgmlab_py", lib, loader=loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                return module
    sys.exit("mgmlab_py not found; build it with cargo build -p mgmlab-python --features extension-module")


def main():
    m = load()

    g = m.MolGraph("c1ccccc1O")
    assert (g.num_nodes, g.num_edges) == (7, 7), g
    assert g.symbols()[:2] == ["c", "c"]
    assert sorted(set(g.subtree_keys()))[0] == "O:c"

    frags = m.fragment(g, "(cycles + fg) > remaining_nodes")
    covered = set()
    for _, nodes, _ in frags:
        covered.update(nodes)
    assert covered == set(range(7)), frags

    subtrees, atoms = m.census(["CO", "c1ccccc1"])
    assert dict(subtrees) == {"c:cc": 6, "C:O": 1, "O:C": 1}
    assert dict(atoms) == {"c": 6, "C": 1, "O": 1}

    emb = {6: [1.0, 0.0], 8: [0.0, 1.0]}
    toks = m.sgt_tokens(m.MolGraph("CO"), emb)
    assert len(toks) == 2 and all(abs(abs(v) - 1.0) < 1e-4 for row in toks for v in row), toks

    tokens, keys = m.motif_tokens(["CCO", "CCO", "c1ccccc1O"], threshold=1)
    assert len(tokens) == 3 and keys

    smiles = [line.split()[0] for line in (ROOT / "crates/core/data/toy100.smi").read_text().splitlines()
              if line.strip() and not line.startswith("#")][:20]
    metrics, ckpt = m.pretrain(smiles, "epochs = 3\ndim = 8\nseed = 1\n")
    assert [e for e, _, _ in metrics] == [1, 2, 3]
    assert all(loss > 0 for _, loss, _ in metrics)
    assert "encoder.embed" in ckpt.names()
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "model.ckpt"
        ckpt.save(str(path))
        again = m.Checkpoint.load(str(path))
        assert again.array("encoder.embed") == ckpt.array("encoder.embed")
        assert again.epoch == 3

    try:
        m.MolGraph("C1CC")
    except ValueError:
        pass
    else:
        raise AssertionError("unclosed ring accepted")

    results = m.gradcheck(instances=2)
    failed = [r for r in results if not r[2]]
    assert not failed, failed

    print(f"ok: {len(results)} gradient checks, final loss {metrics[-1][1]:.4f}")


if __name__ == "__main__":
    main()
