import math
import socket

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wst.backends import (
    ActionOutOfRange,
    BackendKind,
    BackendUnavailable,
    CategoryOutOfRange,
    GenerationRequest,
    MalformedResponse,
    ModelHandle,
    RemoteBackend,
    RetryPolicy,
    Role,
    ScriptedBackend,
    ScriptMiss,
    TeacherPolicy,
    ToyPolicyBackend,
    build_handle,
    generate,
    match_key,
    parse_script,
    policy_distribution,
    policy_grad_logprob,
)


def scripted(script, seed=0):
    return ModelHandle(Role.STUDENT, BackendKind.SCRIPTED, ScriptedBackend(parse_script(script), seed))


def req(text, n=1, seed=None):
    return GenerationRequest(({"role": "user", "content": text},), n=n, seed=seed)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_scripted_lookup():
    out = generate(scripted({"2+2": "4"}), req("what is 2+2?", n=3))
    assert [g.text for g in out] == ["4", "4", "4"]


def test_scripted_longest_key_wins():
    script = parse_script({"": "default", "apple": "A", "apple pie": "P"})
    assert match_key(script, "I like apple pie") == "apple pie"
    assert match_key(script, "I like apples") == "apple"
    assert match_key(script, "nothing") == ""


def test_script_miss():
    with pytest.raises(ScriptMiss):
        generate(scripted({"2+2": "4"}), req("3+3"))


def test_script_probabilities_must_sum_to_one():
    with pytest.raises(ValueError):
        parse_script({"k": [{"probability": 0.5, "response": "a"}, {"probability": 0.4, "response": "b"}]})
    parse_script({"k": [{"probability": 0.1 + 0.2, "response": "a"}, {"probability": 0.7, "response": "b"}]})


def test_scripted_stochastic_frequency_matches_binomial():
    # Binomial(1000, 0.9): sd = sqrt(1000*0.9*0.1)/1000 = 0.0095; [0.87, 0.93] is about 3 sd.
    h = scripted({"q": [{"probability": 0.9, "response": "\\boxed{GOOD}"},
                        {"probability": 0.1, "response": "\\boxed{BAD}"}]}, seed=5)
    out = generate(h, req("q", n=1000, seed=42))
    freq = sum(g.text == "\\boxed{GOOD}" for g in out) / 1000
    assert 0.87 <= freq <= 0.93


def test_scripted_bit_deterministic():
    script = {"q": [{"probability": 0.5, "response": "a"}, {"probability": 0.5, "response": "b"}]}
    a = generate(scripted(script, 3), req("q", n=50, seed=8))
    b = generate(scripted(script, 3), req("q", n=50, seed=8))
    c = generate(scripted(script, 3), req("q", n=50, seed=9))
    assert a == b
    assert a != c


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest((), n=1)
    with pytest.raises(ValueError):
        req("x", n=0)


def test_remote_unreachable_raises_after_retries():
    backend = RemoteBackend(f"http://127.0.0.1:{free_port()}", retry=RetryPolicy(3, 0.01, 1.0))
    h = ModelHandle(Role.STUDENT, BackendKind.REMOTE, backend)
    with pytest.raises(BackendUnavailable, match="3 attempts"):
        generate(h, req("x"))


def test_generate_rejects_short_responses():
    class Short:
        def generate(self, request):
            return []

    with pytest.raises(MalformedResponse):
        generate(ModelHandle("student", "scripted", Short()), req("x", n=2))


def test_toy_policy_is_teacher_only():
    pol = TeacherPolicy.uniform(["a", "b"])
    with pytest.raises(ValueError):
        ModelHandle(Role.STUDENT, BackendKind.TOY_POLICY, ToyPolicyBackend(pol))


def test_build_handle_rejects_unknown_keys():
    with pytest.raises(ValueError, match="bogus"):
        build_handle({"kind": "scripted", "script": {"": "x"}, "bogus": 1}, "student")


def policy(theta, categories=None):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    return TeacherPolicy(tuple(f"t{i}" for i in range(theta.shape[1])), theta, theta.copy())


def test_distribution_symmetric():
    np.testing.assert_allclose(policy_distribution(policy([0, 0])), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(policy_distribution(policy([0, 0, 0, 0])), [0.25] * 4, atol=1e-15)


def test_distribution_ln3():
    # e^{ln 3} / (e^{ln 3} + 1) = 3/4
    np.testing.assert_allclose(policy_distribution(policy([math.log(3), 0])), [0.75, 0.25], atol=1e-15)


def test_distribution_category_range():
    with pytest.raises(CategoryOutOfRange):
        policy_distribution(policy([0, 0]), 1)


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=16))
def test_distribution_is_a_distribution(theta):
    p = policy_distribution(policy(theta))
    assert abs(p.sum() - 1) <= 1e-12
    assert np.all(p > 0)


def test_grad_logprob_hand_value():
    g = policy_grad_logprob(policy([0, 0]), 0, 0)
    np.testing.assert_allclose(g[0], [0.5, -0.5], atol=1e-15)


def test_grad_logprob_other_categories_zero():
    pol = policy([[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]])
    g = policy_grad_logprob(pol, 1, 2)
    assert np.all(g[0] == 0)
    assert abs(g[1].sum()) <= 1e-12


def test_grad_logprob_action_range():
    with pytest.raises(ActionOutOfRange):
        policy_grad_logprob(policy([0, 0]), 0, 2)


def _fd_logprob_grad(theta, action, h=1e-6):
    # Independent log-softmax via math, not the package's helper.
    def logp(t):
        m = max(t)
        return t[action] - m - math.log(sum(math.exp(x - m) for x in t))

    out = []
    for i in range(len(theta)):
        up, dn = list(theta), list(theta)
        up[i] += h
        dn[i] -= h
        out.append((logp(up) - logp(dn)) / (2 * h))
    return np.array(out)


def test_grad_logprob_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        theta = rng.normal(0, 2, n)
        a = int(rng.integers(n))
        analytic = policy_grad_logprob(policy(theta), 0, a)[0]
        fd = _fd_logprob_grad(theta.tolist(), a)
        worst = max(worst, np.linalg.norm(analytic - fd) / np.linalg.norm(fd))
    assert worst <= 1e-5


def test_sample_records_logprob():
    pol = TeacherPolicy(("a", "b"), np.array([[math.log(3), 0.0]]), np.zeros((1, 2)), np.random.default_rng(0))
    ins = pol.sample(0)
    assert ins.action_index in (0, 1)
    assert ins.logprob_old == pytest.approx(math.log(0.75 if ins.action_index == 0 else 0.25))


def test_replace_clones_rng():
    pol = TeacherPolicy.uniform(["a", "b", "c"], seed=4)
    clone = pol.replace()
    assert [pol.sample().action_index for _ in range(20)] == [clone.sample().action_index for _ in range(20)]
