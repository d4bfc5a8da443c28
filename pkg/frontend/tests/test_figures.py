import pytest

from quasiflow_plots import KINDS, FigureSpec, SchemaError, render
from quasiflow_plots.cli import main


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_renders(fake_run, tmp_path, kind):
    out = tmp_path / f"{kind}.png"
    result = render(FigureSpec(run_dir=fake_run, kind=kind, out_path=out))
    assert out.exists() and out.stat().st_size > 1000
    assert result.kind == kind
    assert result.meta["source"]


def test_unknown_kind_rejected(fake_run, tmp_path):
    with pytest.raises(SchemaError):
        FigureSpec(run_dir=fake_run, kind="sparkline", out_path=tmp_path / "x.png")


def test_missing_column_named(fake_run, tmp_path):
    # corrupt the density file: drop the rel_gap column
    path = fake_run / "density_level4.csv"
    lines = path.read_text().splitlines()
    header = lines[0].split(",")[:-1]
    body = [",".join(l.split(",")[:-1]) for l in lines[1:]]
    path.write_text("\n".join([",".join(header)] + body) + "\n")
    with pytest.raises(SchemaError, match="rel_gap"):
        render(FigureSpec(run_dir=fake_run, kind="density-oracle",
                          out_path=tmp_path / "x.png"))


def test_missing_artifact_is_schema_error(tmp_path):
    with pytest.raises(SchemaError):
        render(FigureSpec(run_dir=tmp_path, kind="lambda-curve",
                          out_path=tmp_path / "x.png"))


def test_render_is_deterministic(fake_run, tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    render(FigureSpec(run_dir=fake_run, kind="mollify-convergence", out_path=a))
    render(FigureSpec(run_dir=fake_run, kind="mollify-convergence", out_path=b))
    assert a.read_bytes() == b.read_bytes()


def test_footer_carries_seed_and_hash(fake_run, tmp_path):
    out = tmp_path / "f.png"
    result = render(FigureSpec(run_dir=fake_run, kind="pde-order", out_path=out))
    assert result.meta["order"] == 2.0


class TestCli:
    def test_ok(self, fake_run, tmp_path):
        out = tmp_path / "fig.png"
        rc = main(["--in", str(fake_run), "--fig", "lambda-curve",
                   "--out", str(out)])
        assert rc == 0 and out.exists()

    def test_schema_error_exit(self, tmp_path):
        rc = main(["--in", str(tmp_path), "--fig", "lambda-curve",
                   "--out", str(tmp_path / "fig.png")])
        assert rc == 2
