import pytest

from headprune.config import RunConfig, coerce, parse_flat


def test_round_trip(tmp_path):
    cfg = RunConfig(seed=3, lambda_=0.04, no_gate_init=True, mem_len=16, corpus="x.txt")
    assert RunConfig.loads(cfg.dumps()) == cfg
    cfg.save(tmp_path / "run_config.txt")
    assert RunConfig.load(tmp_path / "run_config.txt") == cfg
    assert "lambda = 0.04" in cfg.dumps()


def test_flat_parsing():
    text = "# comment\nseed = 5\n\nlambda=0.1  # trailing\nno-output-scaling = yes\nmax_vocab = none\n"
    cfg = RunConfig.loads(text)
    assert (cfg.seed, cfg.lambda_, cfg.no_output_scaling, cfg.max_vocab) == (5, 0.1, True, None)
    with pytest.raises(ValueError):
        parse_flat("seed 5")
    with pytest.raises(KeyError):
        RunConfig.loads("sede = 5")
    with pytest.raises(ValueError):
        RunConfig.loads("no_gate_init = maybe")
    with pytest.raises(ValueError):
        RunConfig(metrics_format="xml")


def test_coerce():
    assert coerce("3", int) == 3 and coerce(2, float) == 2.0
    assert coerce("off", bool) is False


def test_schedules_follow_flags():
    cfg = RunConfig(steps=1000, lambda_=0.2)
    s = cfg.prune_schedule()
    assert (s.lambda_warmup_steps, s.gate_freeze_step, s.lambda_target) == (50, 200, 0.2)
    assert cfg.replace(no_lambda_warmup=True).prune_schedule().lambda_warmup_steps == 0
    assert cfg.effective_gate_init == 2.0 and cfg.replace(no_gate_init=True).effective_gate_init == 0.0
    b = cfg.baseline_schedule()
    assert b.lambda_target == 0.0 and b.lr_peak == cfg.lr_peak
    assert cfg.model_config(27).vocab_size == 27
