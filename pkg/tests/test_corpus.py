import pytest

from compgrpo.corpus import (
    CorpusError,
    Dataset,
    Example,
    MiniScanConfig,
    enumerate_commands,
    generate_mini_scan,
    interpret,
    load_tsv,
    subsample,
    template_of,
    to_tsv,
    validate_split,
)


def scan_ds(*targets: str) -> Dataset:
    return Dataset(tuple(Example.from_text("x", t) for t in targets))


def test_load_tsv_example(tmp_path):
    path = tmp_path / "d.tsv"
    path.write_text("jump twice and turn left\tJUMP JUMP LTURN\n", encoding="utf-8")
    ds = load_tsv(path, "SCAN")
    (ex,) = ds.examples
    assert len(ex.source) == 5 and len(ex.target) == 3
    assert ds.formalism == "SCAN"


def test_load_tsv_empty_file(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(CorpusError, match="no examples"):
        load_tsv(path, "SCAN")


def test_load_tsv_missing_tab(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("no tab here\n", encoding="utf-8")
    with pytest.raises(CorpusError, match="line 1"):
        load_tsv(path, "SCAN")


def test_load_tsv_empty_target(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("walk\tWALK\nrun\t  \n", encoding="utf-8")
    with pytest.raises(CorpusError, match="line 2: empty target"):
        load_tsv(path, "SCAN")


def test_load_tsv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tsv(tmp_path / "nope.tsv", "SCAN")


def test_coverage_subset_ok():
    report = validate_split(scan_ds("JUMP RUN", "LTURN"), scan_ds("JUMP LTURN"))
    assert report.ok


def test_coverage_missing_primitive():
    report = validate_split(scan_ds("JUMP RUN", "LTURN"), scan_ds("WALK JUMP"))
    assert not report.ok
    assert {p.name for p in report.test_primitives_missing_from_train} == {"WALK"}


def test_coverage_reflexive():
    ds = scan_ds("JUMP RUN", "LTURN WALK")
    assert validate_split(ds, ds).ok


def test_coverage_formalism_mismatch():
    cogs = Dataset((Example.from_text("a", "cake ( x _ 1 )", "COGS"),))
    with pytest.raises(CorpusError, match="formalism mismatch"):
        validate_split(scan_ds("JUMP"), cogs)


@pytest.mark.parametrize(
    "command, expected",
    [
        ("jump twice after run", "RUN JUMP JUMP"),
        ("run and turn left", "RUN LTURN"),
        ("walk after look thrice and turn right", "LOOK LOOK LOOK RTURN WALK"),
    ],
)
def test_interpret(command, expected):
    assert " ".join(interpret(command)) == expected


def test_interpret_unknown_phrase():
    with pytest.raises(CorpusError):
        interpret("fly twice")


def test_enumeration_sizes():
    # 18 phrases; each connective layer multiplies by 18 * 2
    assert len(enumerate_commands(1)) == 18 + 18 * 2 * 18
    assert len(enumerate_commands(2)) == 18 + 648 + 648 * 36


def test_generation_deterministic():
    a = generate_mini_scan(MiniScanConfig())
    b = generate_mini_scan(MiniScanConfig())
    assert to_tsv(a[0]) == to_tsv(b[0]) and to_tsv(a[1]) == to_tsv(b[1])


def test_default_length_split():
    train, test = generate_mini_scan(MiniScanConfig())
    assert len(train) == 20538 and len(test) == 3456
    assert max(len(t) for t in train.targets()) <= 7
    assert min(len(t) for t in test.targets()) >= 8
    assert validate_split(train, test).ok


def test_template_split():
    train, test = generate_mini_scan(MiniScanConfig(max_depth=1, split_rule=("template", "V twice after V")))
    assert {template_of(" ".join(s)) for s in test.sources()} == {"V twice after V"}
    assert all(template_of(" ".join(s)) != "V twice after V" for s in train.sources())


def test_empty_split_rejected():
    with pytest.raises(CorpusError, match="leaves"):
        generate_mini_scan(MiniScanConfig(split_rule=("length", 100)))


def test_subsample_is_deterministic_subset():
    train, _ = generate_mini_scan(MiniScanConfig(max_depth=1, split_rule=("length", 4)))
    a, b = subsample(train, 50, 3), subsample(train, 50, 3)
    assert a.examples == b.examples and len(a) == 50
    assert set(a.examples) <= set(train.examples)
