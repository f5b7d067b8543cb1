import re

import pytest

from opensetids.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, parse_args, run
from opensetids.flows import BENIGN, read_flows, write_capture
from opensetids.pipeline import UNKNOWN_ATTACK, load_bundle, read_verdicts
from opensetids.synth import default_specs, generate


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """synth -> train once; later tests reuse the artifacts."""
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--classes", "BENIGN", "DoS", "PortScan", "--count", "40",
                "--seed", "1", "-o", str(d / "train.flows")]) == EXIT_OK
    assert run(["synth", "--count", "10", "--seed", "2", "-o", str(d / "test.flows")]) == EXIT_OK
    assert run(["train", str(d / "train.flows"), "-o", str(d / "model.bundle"),
                "--epochs", "3", "--vae-epochs", "2", "--seed", "4"]) == EXIT_OK
    return d


def test_end_to_end(workdir, capsys):
    d = workdir
    assert run(["detect", str(d / "test.flows"), "--bundle", str(d / "model.bundle"),
                "-o", str(d / "verdicts.csv")]) == EXIT_OK
    with open(d / "verdicts.csv", newline="") as fh:
        verdicts = read_verdicts(fh)
    assert len(verdicts) == 40
    assert {v.final_label for v in verdicts} <= {BENIGN, "DoS", "PortScan", UNKNOWN_ATTACK}

    assert run(["eval", str(d / "verdicts.csv"), "--truth", str(d / "test.flows"),
                "--bundle", str(d / "model.bundle"), "--csv", str(d / "report.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "R_unk = " in out and "[confusion]" in out
    assert (d / "report.csv").read_text().startswith("kind,name,value")


def test_detect_to_stdout(workdir, capsys):
    d = workdir
    assert run(["detect", str(d / "test.flows"), "--bundle", str(d / "model.bundle")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("flow_key,")


def test_inspect_reports_bundle_values(workdir, capsys):
    assert run(["inspect", str(workdir / "model.bundle")]) == EXIT_OK
    out = capsys.readouterr().out
    bundle = load_bundle(str(workdir / "model.bundle"))
    kappas = [float(x) for x in re.findall(r"kappa=(\S+)", out)]
    lambdas = [float(x) for x in re.findall(r"lambda=(\S+)", out)]
    assert kappas == [c.weibull.shape for c in bundle.calibrations]
    assert lambdas == [c.weibull.scale for c in bundle.calibrations]
    assert "classes (3): BENIGN, DoS, PortScan" in out


def test_missing_file_is_a_data_error(tmp_path, capsys):
    missing = tmp_path / "nope.flows"
    assert run(["train", str(missing), "-o", str(tmp_path / "m.bundle")]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_corrupt_bundle_is_a_data_error(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.bundle"
    bad.write_bytes((workdir / "model.bundle").read_bytes()[:200])
    assert run(["inspect", str(bad)]) == EXIT_DATA
    assert "CorruptSection" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "x.flows"],
    ["train", "x.flows", "-o", "m", "--threshold-position", "0"],
    ["train", "x.flows", "-o", "m", "--attenuation", "1.5"],
    ["synth", "-o", "x", "--count", "0"],
])
def test_usage_errors(argv, capsys):
    assert run(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_unknown_stock_class(tmp_path):
    assert run(["synth", "--classes", "Nope", "-o", str(tmp_path / "x")]) == EXIT_USAGE


def test_config_supplies_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nepochs = 7\nvae-epochs = 2\nseed = 5\n")
    args = parse_args(["--config", str(cfg), "train", "f", "-o", "m", "--seed", "9"])
    assert (args.epochs, args.vae_epochs, args.seed) == (7, 2, 9)
    assert args.attenuation == 0.5


def test_bad_config_values(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = many\n")
    assert run(["--config", str(cfg), "train", "f", "-o", "m"]) == EXIT_USAGE
    cfg.write_text("just words\n")
    assert run(["--config", str(cfg), "train", "f", "-o", "m"]) == EXIT_USAGE
    assert run(["--config", str(tmp_path / "absent.cfg"), "inspect", "b"]) == EXIT_DATA


def test_assemble_from_capture_and_labels(tmp_path):
    flows = generate(default_specs()[:2], 3, seed=8)
    packets = sorted((p for f in flows for p in f.packets), key=lambda p: p.timestamp)
    (tmp_path / "cap.pcap").write_bytes(write_capture(packets))
    dos = [f for f in flows if f.label == "DoS"]
    rows = ["src_ip,dst_ip,start_time,end_time,label"]
    rows += [f"{f.initiator[0]},{f.responder[0]},{f.start_time - 1},{f.start_time + 1},DoS"
             for f in dos]
    (tmp_path / "labels.csv").write_text("\n".join(rows) + "\n")
    out = tmp_path / "cap.flows"
    assert run(["assemble", str(tmp_path / "cap.pcap"), "--labels", str(tmp_path / "labels.csv"),
                "-o", str(out)]) == EXIT_OK
    got = read_flows(out.read_bytes())
    assert len(got) == len(flows)
    assert sorted(f.label for f in got) == sorted(f.label for f in flows)
    assert {str(f.key) for f in got} == {str(f.key) for f in flows}


def test_eval_rejects_misaligned_truth(workdir, tmp_path):
    d = workdir
    run(["detect", str(d / "test.flows"), "--bundle", str(d / "model.bundle"),
         "-o", str(tmp_path / "v.csv")])
    assert run(["eval", str(tmp_path / "v.csv"), "--truth", str(d / "train.flows"),
                "--bundle", str(d / "model.bundle")]) == EXIT_DATA
