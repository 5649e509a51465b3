import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from advkd.data import make_shapes_dataset
from advkd.distill import (
    Critic,
    DistillConfig,
    DistillError,
    LipschitzPolicy,
    apply_lipschitz_policy,
    build_critic,
    critic_loss,
    critic_update,
    distill,
    generator_loss,
    gradient_penalty_at,
    train_stage,
)
from advkd.student import StudentConfig, StudentModel, build_student
from advkd.teacher import TeacherConfig, build_teacher, train_teacher
from advkd.trajectory import TrajectoryDataset, build_stage_plan, generate_dataset

floats = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20)


class TestLosses:
    @pytest.mark.parametrize("c", [0.0, 1.5, -3.0])
    def test_constant_critic(self, c):
        assert float(critic_loss([c] * 3, [c] * 5)) == 0.0

    def test_hand_values(self):
        assert float(critic_loss([1, 1], [0, 0, 0])) == -1.0
        assert float(critic_loss([0.2, 0.4], [0.1, 0.5])) == pytest.approx(0.0, abs=1e-15)
        assert float(generator_loss([0, 0])) == 0.0
        assert float(generator_loss([0.5] * 4)) == -0.5
        assert float(generator_loss([1, -1, 2])) == pytest.approx(-2 / 3, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            critic_loss([], [1.0])
        with pytest.raises(ValueError):
            generator_loss(torch.zeros(0))

    @settings(max_examples=50, deadline=None)
    @given(floats, floats)
    def test_antisymmetric(self, a, b):
        assert float(critic_loss(a, b)) == pytest.approx(-float(critic_loss(b, a)), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(floats, st.floats(-100, 100))
    def test_generator_loss_linear(self, d, alpha):
        scaled = [alpha * x for x in d]
        assert float(generator_loss(scaled)) == pytest.approx(alpha * float(generator_loss(d)), rel=1e-9, abs=1e-9)

    def test_tensor_inputs_keep_graph(self):
        d = torch.tensor([1.0, 2.0], requires_grad=True)
        generator_loss(d).backward()
        torch.testing.assert_close(d.grad, torch.tensor([-0.5, -0.5]))


def linear_critic(w: torch.Tensor) -> nn.Module:
    lin = nn.Linear(w.numel(), 1, bias=True).double()
    with torch.no_grad():
        lin.weight.copy_(w.reshape(1, -1))
        lin.bias.fill_(0.3)
    return nn.Sequential(nn.Flatten(), lin)


def fd_penalty(critic, x, lam, h=1e-6):
    """Central finite differences of the critic's input gradient, one coordinate at a time."""
    norms = []
    for i in range(x.shape[0]):
        xi = x[i : i + 1].clone()
        flat = xi.view(-1)
        g = torch.zeros_like(flat)
        for j in range(flat.numel()):
            old = flat[j].item()
            flat[j] = old + h
            up = critic(xi).item()
            flat[j] = old - h
            down = critic(xi).item()
            flat[j] = old
            g[j] = (up - down) / (2 * h)
        norms.append(g.norm().item())
    return lam * float(np.mean((np.array(norms) - 1.0) ** 2))


class TestLipschitz:
    def test_linear_critic_penalty(self):
        w = torch.tensor([0.6, -2.0, 1.0, 0.5], dtype=torch.float64)
        x = torch.randn(5, 1, 2, 2, dtype=torch.float64)
        expected = 10.0 * (w.norm().item() - 1) ** 2
        assert gradient_penalty_at(linear_critic(w), x, 10.0).item() == pytest.approx(expected, rel=1e-12)
        assert gradient_penalty_at(linear_critic(w), 7 * x + 1, 10.0).item() == pytest.approx(expected, rel=1e-12)

    def test_zero_iff_unit_gradient(self):
        w = torch.tensor([0.6, 0.8], dtype=torch.float64)
        x = torch.randn(3, 1, 1, 2, dtype=torch.float64)
        assert gradient_penalty_at(linear_critic(w), x, 10.0).item() == pytest.approx(0.0, abs=1e-24)
        assert gradient_penalty_at(linear_critic(1.01 * w), x, 10.0).item() > 0

    def test_penalty_matches_finite_differences(self):
        critic = build_critic(0, 4, 3, LipschitzPolicy.gradient_penalty(10.0), width=8, init_seed=1).double()
        x = torch.randn(3, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        auto = gradient_penalty_at(critic, x, 10.0).item()
        assert auto == pytest.approx(fd_penalty(critic, x, 10.0), rel=1e-3)

    def test_penalty_matches_fd_on_strided_critic(self):
        critic = build_critic(0, 8, 1, LipschitzPolicy.gradient_penalty(1.0), width=4, init_seed=2).double()
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        assert gradient_penalty_at(critic, x, 1.0).item() == pytest.approx(fd_penalty(critic, x, 1.0), rel=1e-3)

    def test_weight_clip_after_every_update(self):
        policy = LipschitzPolicy.weight_clip(0.01)
        critic = build_critic(0, 8, 3, policy, width=8)
        opt = DistillConfig(lipschitz_policy=policy).optimizer(critic.parameters(), 0.5)  # huge lr on purpose
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            critic_update(critic, opt, torch.randn(4, 3, 8, 8, generator=g), torch.randn(4, 3, 8, 8, generator=g))
            assert max(p.abs().max().item() for p in critic.parameters()) <= 0.01

    def test_apply_policy(self):
        clip = build_critic(0, 4, 3, LipschitzPolicy.weight_clip(0.05), width=4)
        assert apply_lipschitz_policy(clip, None, None) is None
        assert max(p.abs().max().item() for p in clip.parameters()) <= 0.05
        gp = build_critic(0, 4, 3, LipschitzPolicy.gradient_penalty(10.0), width=4)
        pen = apply_lipschitz_policy(gp, torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4))
        assert pen.item() >= 0 and pen.requires_grad

    def test_critic_structure(self):
        c = build_critic(3, 32, 3, LipschitzPolicy.gradient_penalty(), width=8)
        assert c(torch.randn(5, 3, 32, 32)).shape == (5,)
        assert not any(isinstance(m, nn.BatchNorm2d) for m in c.modules())
        assert any(isinstance(m, nn.BatchNorm2d) for m in build_critic(3, 32, 3, LipschitzPolicy.weight_clip()).modules())
        with pytest.raises(ValueError):
            c(torch.randn(1, 3, 16, 16))


def test_critic_objective_rises_on_separable_set():
    policy = LipschitzPolicy.weight_clip(0.01)
    critic = build_critic(0, 4, 3, policy, width=8, init_seed=0)
    g = torch.Generator().manual_seed(0)
    real = 0.5 + 0.05 * torch.randn(32, 3, 4, 4, generator=g)
    fake = -0.5 + 0.05 * torch.randn(32, 3, 4, 4, generator=g)
    opt = DistillConfig(lipschitz_policy=policy).optimizer(critic.parameters(), None)

    def objective():
        with torch.no_grad():
            return (critic(real).mean() - critic(fake).mean()).item()

    values = [objective()]
    for _ in range(50):
        critic_update(critic, opt, real, fake)
        values.append(objective())
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] > values[0]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """16 trajectories from a barely trained 8px teacher; 4-stage student plan 2 -> 8px."""
    cfg = TeacherConfig(image_resolution=8, base_width=8, channel_multipliers=(1, 2), time_embedding_dim=16)
    ckpt = train_teacher(build_teacher(cfg), make_shapes_dataset(8, 8), cfg.schedule(), steps=20, batch_size=8)
    plan = build_stage_plan(4, 2, 8, latent_channels=16)
    out = tmp_path_factory.mktemp("toy")
    generate_dataset(ckpt, plan, 16, "ddim", 20, seed_base=0, out_dir=out, chunk_size=16)
    return TrajectoryDataset(out), StudentConfig.from_plan(plan)


def quick(policy, steps=3, **kw):
    return DistillConfig(steps_per_stage=steps, critic_steps_per_generator_step=2, lipschitz_policy=policy,
                         seed=1, critic_width=8, batch_size=4, **kw)


def snapshot(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


@pytest.mark.parametrize("policy", [LipschitzPolicy.weight_clip(), LipschitzPolicy.gradient_penalty()])
def test_full_run_finite(toy, policy):
    ds, scfg = toy
    model, reports = distill(build_student(scfg), ds, quick(policy))
    assert [r.stage for r in reports] == [2, 1, 0, 3]
    for r in reports:
        assert r.generator_steps == 3 and r.critic_steps == 6
        assert np.all(np.isfinite(r.critic_losses + r.generator_losses))
    assert model.trained_stages == {0, 1, 2, 3}


def test_zero_steps_is_noop(toy):
    ds, scfg = toy
    model = build_student(scfg)
    before = snapshot(model)
    critic = build_critic(2, 4, 3, LipschitzPolicy.weight_clip(), width=8)
    report = train_stage(model, critic, ds, 2, quick(LipschitzPolicy.weight_clip(), steps=0))
    assert report.generator_steps == 0
    assert all(torch.equal(v, before[k]) for k, v in model.state_dict().items())


def test_stage_isolation(toy):
    ds, scfg = toy
    model = build_student(scfg)
    model.trained_stages = {2}
    before = snapshot(model)
    critic = build_critic(1, 4, 3, LipschitzPolicy.gradient_penalty(), width=8)
    train_stage(model, critic, ds, 1, quick(LipschitzPolicy.gradient_penalty(), steps=4))
    after = model.state_dict()
    changed = {k for k in after if not torch.equal(after[k], before[k])}
    assert changed and all(k.startswith(("submodules.1.", "heads.1.")) for k in changed)


def test_requires_trained_upstream(toy):
    ds, scfg = toy
    critic = build_critic(0, 8, 3, LipschitzPolicy.weight_clip(), width=8)
    with pytest.raises(DistillError):
        train_stage(build_student(scfg), critic, ds, 0, quick(LipschitzPolicy.weight_clip()))


def test_batch_larger_than_dataset(toy):
    ds, scfg = toy
    critic = build_critic(2, 4, 3, LipschitzPolicy.weight_clip(), width=8)
    cfg = quick(LipschitzPolicy.weight_clip())
    cfg.batch_size = 17
    with pytest.raises(DistillError):
        train_stage(build_student(scfg), critic, ds, 2, cfg)


def test_stage_order_must_be_permutation(toy):
    ds, scfg = toy
    with pytest.raises(DistillError):
        distill(build_student(scfg), ds, quick(LipschitzPolicy.weight_clip(), stage_order=[2, 1, 0]))


def test_resume_reproduces_remaining_stages(tmp_path, toy):
    ds, scfg = toy
    policy = LipschitzPolicy.gradient_penalty()
    full, _ = distill(build_student(scfg, 3), ds, quick(policy), checkpoint_dir=tmp_path / "a",
                      report_path=tmp_path / "a.jsonl")
    partial = StudentModel.load(tmp_path / "a" / "stage_01_n1.ckpt")
    assert partial.trained_stages == {2, 1}
    resumed, reports = distill(partial, ds, quick(policy))
    assert [r.stage for r in reports] == [0, 3]
    for k, v in full.state_dict().items():
        assert torch.equal(v, resumed.state_dict()[k]), k

    rows = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(rows) == 4 * (3 * 2 + 3)
    assert set(rows[0]) == {"stage", "step", "critic_loss", "generator_loss", "wall_ms"}


def test_rerun_byte_identical(tmp_path, toy):
    ds, scfg = toy
    for name in ("x", "y"):
        distill(build_student(scfg, 0), ds, quick(LipschitzPolicy.weight_clip()), checkpoint_dir=tmp_path / name)
    assert (tmp_path / "x" / "latest.ckpt").read_bytes() == (tmp_path / "y" / "latest.ckpt").read_bytes()
