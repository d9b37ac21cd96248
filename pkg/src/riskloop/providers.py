"""Pluggable sampler/embedder/verifier providers.

Two families live here: a fully deterministic synthetic task environment
for offline testing (a pure function of spec and seed), and thin adapters
speaking the standard OpenAI-compatible chat/embeddings wire protocol for
live runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping, Sequence

import numpy as np


class ProviderError(Exception):
    """Base class for provider-side failures the engine surfaces."""


class UnknownText(ProviderError):
    """Asked to embed a text this synthetic spec never produced."""


class AuthError(ProviderError):
    """Missing or rejected credential; raised before any network activity
    when the credential is absent."""


class TransportError(ProviderError):
    """Transport kept failing after the retry budget was spent."""


class MalformedResponse(ProviderError):
    """The remote endpoint answered with an unparseable payload."""


HASH_EMBED_DIM = 384
SYNTHETIC_DIM = 128
_CENTROID_AXES = SYNTHETIC_DIM // 2  # remaining axes reserved for consumed views

MC_TEMPERATURE = 0.7
GREEDY_TEMPERATURE = 0.0

# reserved slot name marking an unparseable structured-understanding reply;
# consumers treat it as maximal slot uncertainty
PARSE_FAILURE_SLOT = "__parse_failure__"


# ---------------------------------------------------------------------------
# Requests and samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerRequest:
    prompt: str
    temperature: float = MC_TEMPERATURE
    n: int = 1
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class StepSample:
    text: str
    references: frozenset[int] = frozenset()
    slots: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class SampleBatch:
    samples: tuple[StepSample, ...]
    sampler_calls: int


@dataclass(frozen=True)
class RefinementNote:
    """Carries root-cause context into the next generation attempt.

    Only the live adapter interpolates it into a prompt; the synthetic
    environment ignores it."""

    previous_answer: str
    verdict: str
    failure_reason: str
    root_cause: str
    step_description: str


# ---------------------------------------------------------------------------
# Synthetic task environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interpretation:
    answer: str
    probability: float


@dataclass(frozen=True)
class ReferenceSpec:
    producer: int
    flake_rate: float = 0.0
    compatibility: float = 1.0

    def __post_init__(self) -> None:
        if self.producer < 0:
            raise ValueError("producer must be a step index >= 0")
        if not 0.0 <= self.flake_rate <= 1.0:
            raise ValueError("flake_rate must lie in [0, 1]")
        if not 0.0 <= self.compatibility <= 1.0:
            raise ValueError("compatibility must lie in [0, 1]")


@dataclass(frozen=True)
class SlotSpec:
    name: str
    values: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        total = sum(p for _, p in self.values)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"slot {self.name!r} probabilities must sum to 1")


@dataclass(frozen=True)
class StepSpec:
    """One workflow step: a categorical distribution over interpretations,
    declared references to earlier steps, and a verifier behaviour.

    ``conservative`` optionally gives a second distribution used for the
    cleaned-up regeneration path; it defaults to the main distribution.
    """

    interpretations: tuple[Interpretation, ...]
    correct_index: int
    references: tuple[ReferenceSpec, ...] = ()
    verifier_mode: str = "exact"  # exact | always_pass | always_fail
    conservative: tuple[float, ...] | None = None
    slots: tuple[SlotSpec, ...] = ()

    def __post_init__(self) -> None:
        if not self.interpretations:
            raise ValueError("a step needs at least one interpretation")
        total = sum(i.probability for i in self.interpretations)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("interpretation probabilities must sum to 1")
        if not 0 <= self.correct_index < len(self.interpretations):
            raise ValueError("correct_index out of range")
        if self.verifier_mode not in ("exact", "always_pass", "always_fail"):
            raise ValueError(f"unknown verifier mode {self.verifier_mode!r}")
        if self.conservative is not None:
            if len(self.conservative) != len(self.interpretations):
                raise ValueError("conservative distribution must cover all interpretations")
            if abs(sum(self.conservative) - 1.0) > 1e-9:
                raise ValueError("conservative probabilities must sum to 1")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    steps: tuple[StepSpec, ...]
    statement: str = "synthetic task"
    embedding_noise: float = 0.0

    def __post_init__(self) -> None:
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if not self.steps:
            raise ValueError("a task needs at least one step")
        if len(self.steps) * 8 > _CENTROID_AXES:
            raise ValueError("too many steps for the synthetic embedding layout")
        for index, step in enumerate(self.steps):
            if len(step.interpretations) > 8:
                raise ValueError("at most 8 interpretations per step")
            for ref in step.references:
                if ref.producer >= index:
                    raise ValueError("references must point to earlier steps")
        if self.embedding_noise < 0:
            raise ValueError("embedding noise must be >= 0")


def single_step_task(task_id: str, interpretations: Sequence[tuple[str, float]],
                     correct_index: int, statement: str = "synthetic task",
                     verifier_mode: str = "exact",
                     conservative: Sequence[float] | None = None,
                     embedding_noise: float = 0.0) -> SyntheticTaskSpec:
    step = StepSpec(
        interpretations=tuple(Interpretation(a, p) for a, p in interpretations),
        correct_index=correct_index,
        verifier_mode=verifier_mode,
        conservative=None if conservative is None else tuple(conservative),
    )
    return SyntheticTaskSpec(task_id=task_id, steps=(step,), statement=statement,
                             embedding_noise=embedding_noise)


def _derive_rng(*key_parts: object) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(p) for p in key_parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _draw(rng: np.random.Generator, probabilities: Sequence[float]) -> int:
    point = rng.random()
    cumulative = 0.0
    for index, p in enumerate(probabilities):
        cumulative += p
        if point < cumulative:
            return index
    return len(probabilities) - 1


class SyntheticProvider:
    """Deterministic stand-in for an LLM-backed task environment.

    Every draw derives its generator from (seed, problem, step, revision,
    purpose), so identical runs reproduce byte-identical behaviour and the
    greedy path is stable across re-executions, the way a temperature-zero
    model would be.
    """

    def __init__(self, tasks: Mapping[str, SyntheticTaskSpec], seed: int = 0):
        self.tasks = dict(tasks)
        self.seed = seed
        self._known_texts: dict[str, dict[str, tuple[int, int]]] = {}

    # -- plumbing -----------------------------------------------------------

    def _spec(self, problem_id: str) -> SyntheticTaskSpec:
        try:
            return self.tasks[problem_id]
        except KeyError:
            raise ProviderError(f"no synthetic task {problem_id!r}") from None

    def _register(self, task_id: str, text: str, step: int, interp: int) -> None:
        self._known_texts.setdefault(task_id, {})[text] = (step, interp)

    def _compose(self, answer: str, upstream: Sequence[str]) -> str:
        if not upstream:
            return answer
        digest = hashlib.sha1("\x1f".join(upstream).encode("utf-8")).hexdigest()[:8]
        return f"{answer}#{digest}"

    def _upstream_texts(self, spec: SyntheticTaskSpec, step_index: int,
                        outputs: Mapping[int, str]) -> list[str]:
        texts = []
        for ref in spec.steps[step_index].references:
            if ref.producer not in outputs:
                raise ProviderError(
                    f"step {step_index} of {spec.task_id} needs output of step {ref.producer}")
            texts.append(outputs[ref.producer])
        return texts

    def _make_sample(self, spec: SyntheticTaskSpec, step_index: int, interp_index: int,
                     outputs: Mapping[int, str], references: frozenset[int],
                     slots: Mapping[str, str]) -> StepSample:
        answer = spec.steps[step_index].interpretations[interp_index].answer
        text = self._compose(answer, self._upstream_texts(spec, step_index, outputs))
        self._register(spec.task_id, text, step_index, interp_index)
        return StepSample(text=text, references=references, slots=slots)

    # -- provider protocol ---------------------------------------------------

    def step_count(self, problem) -> int:
        return len(self._spec(problem.id).steps)

    def sample_cost(self, n: int) -> int:
        return n

    def sample_step(self, problem, step_index: int, outputs: Mapping[int, str],
                    n: int, revision: int = 0,
                    refinement: RefinementNote | None = None) -> SampleBatch:
        spec = self._spec(problem.id)
        step = spec.steps[step_index]
        rng = _derive_rng(self.seed, problem.id, step_index, revision, "mc")
        probs = [i.probability for i in step.interpretations]
        samples = []
        for sample_index in range(n):
            interp = _draw(rng, probs)
            refs = frozenset(
                ref.producer for ref in step.references
                if ref.flake_rate == 0.0 or rng.random() >= ref.flake_rate)
            slots = {slot.name: slot.values[_draw(rng, [p for _, p in slot.values])][0]
                     for slot in step.slots}
            samples.append(self._make_sample(spec, step_index, interp, outputs, refs, slots))
        return SampleBatch(samples=tuple(samples), sampler_calls=n)

    def greedy_step(self, problem, step_index: int, outputs: Mapping[int, str],
                    refinement: RefinementNote | None = None) -> StepSample:
        """Temperature-zero decode: one committed interpretation per problem
        and step, stable across re-executions."""
        spec = self._spec(problem.id)
        step = spec.steps[step_index]
        rng = _derive_rng(self.seed, problem.id, step_index, "greedy")
        interp = _draw(rng, [i.probability for i in step.interpretations])
        refs = frozenset(ref.producer for ref in step.references)
        slots = {slot.name: slot.values[_draw(rng, [p for _, p in slot.values])][0]
                 for slot in step.slots}
        return self._make_sample(spec, step_index, interp, outputs, refs, slots)

    def conservative_step(self, problem, step_index: int, outputs: Mapping[int, str],
                          revision: int = 0, ordinal: int = 0,
                          refinement: RefinementNote | None = None) -> StepSample:
        """Regeneration with the cleaned-up reading of the step."""
        spec = self._spec(problem.id)
        step = spec.steps[step_index]
        probs = step.conservative if step.conservative is not None else \
            [i.probability for i in step.interpretations]
        rng = _derive_rng(self.seed, problem.id, step_index, revision, "conservative", ordinal)
        interp = _draw(rng, list(probs))
        refs = frozenset(ref.producer for ref in step.references)
        return self._make_sample(spec, step_index, interp, outputs, refs, {})

    def embed_batch(self, problem, texts: Sequence[str], context_key: str) -> np.ndarray:
        """Centroid of each text's interpretation plus seeded isotropic noise."""
        spec = self._spec(problem.id)
        known = self._known_texts.get(problem.id, {})
        rng = _derive_rng(self.seed, problem.id, context_key, "embed")
        vectors = np.zeros((len(texts), SYNTHETIC_DIM))
        for row, text in enumerate(texts):
            if text not in known:
                raise UnknownText(f"text {text!r} was not produced by task {problem.id}")
            step_index, interp_index = known[text]
            centroid = np.zeros(SYNTHETIC_DIM)
            centroid[step_index * 8 + interp_index] = 1.0
            if spec.embedding_noise > 0:
                # embedding_noise is the norm of the perturbation vector
                direction = rng.standard_normal(SYNTHETIC_DIM)
                direction /= np.linalg.norm(direction)
                centroid = centroid + spec.embedding_noise * direction
            vectors[row] = centroid / np.linalg.norm(centroid)
        return vectors

    def consumed_embedding(self, problem, consumer_step: int, producer_step: int,
                           produced_vec: Sequence[float]) -> np.ndarray:
        """Consumer-side view of a reference, built so cos(view, produced)
        equals the declared compatibility exactly."""
        spec = self._spec(problem.id)
        target = None
        for ref in spec.steps[consumer_step].references:
            if ref.producer == producer_step:
                target = ref.compatibility
                break
        if target is None:
            raise ProviderError(
                f"step {consumer_step} declares no reference to {producer_step}")
        produced = np.asarray(produced_vec, dtype=float)
        produced = produced / np.linalg.norm(produced)
        axis_index = _CENTROID_AXES + (consumer_step * 8 + producer_step) % _CENTROID_AXES
        axis = np.zeros(SYNTHETIC_DIM)
        axis[axis_index] = 1.0
        ortho = axis - (axis @ produced) * produced
        norm = np.linalg.norm(ortho)
        if norm < 1e-12:
            raise ProviderError("degenerate orthogonal axis for consumed view")
        ortho = ortho / norm
        view = target * produced + math.sqrt(max(0.0, 1.0 - target * target)) * ortho
        return view / np.linalg.norm(view)

    def verify(self, problem, step_index: int, text: str) -> bool:
        spec = self._spec(problem.id)
        step = spec.steps[step_index]
        if step.verifier_mode == "always_pass":
            return True
        if step.verifier_mode == "always_fail":
            return False
        return text == self.ground_truth(problem.id, step_index)

    def ground_truth(self, task_id: str, step_index: int) -> str:
        """Composition of correct interpretations down the reference chain."""
        spec = self._spec(task_id)

        def build(index: int) -> str:
            step = spec.steps[index]
            upstream = [build(ref.producer) for ref in step.references]
            return self._compose(step.interpretations[step.correct_index].answer, upstream)

        return build(step_index)


# ---------------------------------------------------------------------------
# Hash embedding (offline stand-in, 384 dimensions)
# ---------------------------------------------------------------------------

def hash_embed(text: str) -> np.ndarray:
    """Token-level feature hashing into 384 buckets, renormalized.

    Identical texts map to identical vectors; texts whose token sets hash
    to disjoint buckets are exactly orthogonal.
    """
    if not text:
        raise ValueError("text must be non-empty")
    tokens = text.lower().split()
    if not tokens:
        raise ValueError("text must contain at least one token")
    vector = np.zeros(HASH_EMBED_DIM)
    for token in tokens:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:4], "little") % HASH_EMBED_DIM
        vector[bucket] += 1.0
    return vector / np.linalg.norm(vector)


def hash_bucket(token: str) -> int:
    digest = hashlib.sha256(token.lower().encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % HASH_EMBED_DIM


# ---------------------------------------------------------------------------
# Reference detection for live rollouts
# ---------------------------------------------------------------------------

_STEP_NAME_RE = re.compile(r"\bstep[\s-]?(\d+)\b", re.IGNORECASE)
QUOTE_FRACTION = 0.6


def detect_references(sample_text: str, prior_outputs: Mapping[int, str]) -> frozenset[int]:
    """A sample references step k when it names the step or quotes at least
    60% of k's output tokens."""
    found = {int(m) for m in _STEP_NAME_RE.findall(sample_text)
             if int(m) in prior_outputs}
    sample_tokens = set(sample_text.lower().split())
    for step, output in prior_outputs.items():
        tokens = set(output.lower().split())
        if not tokens:
            continue
        if len(tokens & sample_tokens) / len(tokens) >= QUOTE_FRACTION:
            found.add(step)
    return frozenset(found)


# ---------------------------------------------------------------------------
# OpenAI-compatible remote clients
# ---------------------------------------------------------------------------

ENV_BASE_URL = "RISKLOOP_BASE_URL"
ENV_API_KEY = "RISKLOOP_API_KEY"
ENV_CHAT_MODEL = "RISKLOOP_CHAT_MODEL"
ENV_EMBED_MODEL = "RISKLOOP_EMBED_MODEL"

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}
MAX_ATTEMPTS = 3


def _load_prompt(name: str) -> str:
    return resources.files("riskloop.data.prompts").joinpath(name).read_text("utf-8")


class RemoteChatClient:
    """Chat-completion client for any OpenAI-compatible endpoint.

    Retries idempotently with exponential backoff on transient transport
    errors; a logical completion is whatever the caller charges, retries
    never multiply it.
    """

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 model: str | None = None, timeout: float = 60.0,
                 max_attempts: int = MAX_ATTEMPTS,
                 transport=None, sleeper: Callable[[float], None] = time.sleep):
        self.base_url = (base_url or os.environ.get(ENV_BASE_URL, "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key or os.environ.get(ENV_API_KEY)
        if not self.api_key:
            raise AuthError(f"no API credential; set {ENV_API_KEY}")
        self.model = model or os.environ.get(ENV_CHAT_MODEL, "gpt-4o-mini")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self._sleeper = sleeper
        import httpx
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete_request(self, request: SamplerRequest) -> list[str]:
        return self.complete([{"role": "user", "content": request.prompt}],
                             n=request.n, temperature=request.temperature)

    def complete(self, messages: Sequence[Mapping[str, str]], n: int = 1,
                 temperature: float = 0.0, max_tokens: int = 4096) -> list[str]:
        import httpx
        payload = {
            "model": self.model,
            "messages": list(messages),
            "temperature": temperature,
            "n": n,
            "max_tokens": max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                response = self._client.post(
                    f"{self.base_url}/chat/completions", json=payload, headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
                self._sleeper(0.5 * 2 ** attempt)
                continue
            if response.status_code in _RETRYABLE_STATUS:
                last_error = TransportError(f"status {response.status_code}")
                self._sleeper(0.5 * 2 ** attempt)
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"credential rejected (status {response.status_code})")
            if response.status_code != 200:
                raise TransportError(f"unexpected status {response.status_code}")
            return self._parse(response)
        raise TransportError(f"gave up after {self.max_attempts} attempts: {last_error}")

    @staticmethod
    def _parse(response) -> list[str]:
        try:
            body = response.json()
            choices = body["choices"]
            texts = [choice["message"]["content"] for choice in choices]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad chat payload: {exc}") from exc
        if not texts or any(not isinstance(t, str) for t in texts):
            raise MalformedResponse("chat payload held no string completions")
        return texts


class RemoteEmbeddingClient:
    """Embeddings client for the same wire protocol, unit-normalized output."""

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 model: str | None = None, timeout: float = 60.0,
                 max_attempts: int = MAX_ATTEMPTS,
                 transport=None, sleeper: Callable[[float], None] = time.sleep):
        self.base_url = (base_url or os.environ.get(ENV_BASE_URL, "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key or os.environ.get(ENV_API_KEY)
        if not self.api_key:
            raise AuthError(f"no API credential; set {ENV_API_KEY}")
        self.model = model or os.environ.get(ENV_EMBED_MODEL, "text-embedding-3-small")
        self.max_attempts = max_attempts
        self._sleeper = sleeper
        import httpx
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import httpx
        payload = {"model": self.model, "input": list(texts)}
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                response = self._client.post(
                    f"{self.base_url}/embeddings", json=payload, headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
                self._sleeper(0.5 * 2 ** attempt)
                continue
            if response.status_code in _RETRYABLE_STATUS:
                last_error = TransportError(f"status {response.status_code}")
                self._sleeper(0.5 * 2 ** attempt)
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"credential rejected (status {response.status_code})")
            if response.status_code != 200:
                raise TransportError(f"unexpected status {response.status_code}")
            return self._parse(response, len(texts))
        raise TransportError(f"gave up after {self.max_attempts} attempts: {last_error}")

    @staticmethod
    def _parse(response, expected: int) -> np.ndarray:
        try:
            body = response.json()
            rows = sorted(body["data"], key=lambda item: item["index"])
            vectors = np.asarray([row["embedding"] for row in rows], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad embeddings payload: {exc}") from exc
        if vectors.shape[0] != expected:
            raise MalformedResponse(
                f"expected {expected} embeddings, got {vectors.shape[0]}")
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise MalformedResponse("zero-norm embedding in payload")
        return vectors / norms


_SOLUTION_PROMPTS = {
    "math": "solution_math.txt",
    "code": "solution_code.txt",
    "qa": "solution_qa.txt",
}
_VERIFY_PROMPTS = {
    "math": "verify_math.txt",
    "code": "verify_math.txt",
    "qa": "verify_qa.txt",
}


class LiveTaskAdapter:
    """Single-step live task provider built on the remote clients.

    The problem statement is answered in one terminal step; slot structure
    comes from the structured understanding prompt when enabled, with a
    strict parse where any malformed reply means maximal slot uncertainty.
    """

    def __init__(self, chat: RemoteChatClient, embedder: RemoteEmbeddingClient,
                 include_slots: bool = False, max_tokens: int = 4096):
        self.chat = chat
        self.embedder = embedder
        self.include_slots = include_slots
        self.max_tokens = max_tokens

    def step_count(self, problem) -> int:
        return 1

    def sample_cost(self, n: int) -> int:
        return 2 * n if self.include_slots else n

    def _solution_prompt(self, problem, refinement: RefinementNote | None) -> str:
        kind = getattr(problem.task_kind, "value", str(problem.task_kind))
        template = _load_prompt(_SOLUTION_PROMPTS.get(kind, "solution_qa.txt"))
        prompt = template.replace("{problem_text}", problem.statement)
        prompt = prompt.replace("{answer_form}", problem.metadata.get("answer_form", "text"))
        prompt = prompt.replace("{function_signature}", problem.metadata.get("function_signature", ""))
        prompt = prompt.replace("{context}", problem.metadata.get("context", ""))
        prompt = prompt.replace("{question}", problem.statement)
        if refinement is not None:
            template = _load_prompt("refine_root_cause.txt")
            prompt = (template
                      .replace("{problem_text}", problem.statement)
                      .replace("{previous_answer}", refinement.previous_answer)
                      .replace("{verdict}", refinement.verdict)
                      .replace("{failure_reason}", refinement.failure_reason)
                      .replace("{root_cause}", refinement.root_cause)
                      .replace("{step_description}", refinement.step_description))
        return prompt

    def _extract_slots(self, problem, n: int) -> list[dict[str, str]]:
        kind = getattr(problem.task_kind, "value", str(problem.task_kind))
        name = "understanding_qa.txt" if kind == "qa" else "understanding_math_code.txt"
        template = _load_prompt(name)
        prompt = (template
                  .replace("{problem_text}", problem.statement)
                  .replace("{context}", problem.metadata.get("context", ""))
                  .replace("{question}", problem.statement))
        replies = self.chat.complete([{"role": "user", "content": prompt}],
                                     n=n, temperature=MC_TEMPERATURE,
                                     max_tokens=self.max_tokens)
        extracted = []
        for reply in replies:
            try:
                data = json.loads(reply)
                if not isinstance(data, dict):
                    raise ValueError("not an object")
                extracted.append({key: json.dumps(value, sort_keys=True)
                                  for key, value in data.items()})
            except ValueError:
                extracted.append({PARSE_FAILURE_SLOT: "1"})
        return extracted

    def sample_step(self, problem, step_index: int, outputs: Mapping[int, str],
                    n: int, revision: int = 0,
                    refinement: RefinementNote | None = None) -> SampleBatch:
        prompt = self._solution_prompt(problem, refinement)
        texts = self.chat.complete([{"role": "user", "content": prompt}],
                                   n=n, temperature=MC_TEMPERATURE,
                                   max_tokens=self.max_tokens)
        slot_maps: list[Mapping[str, str]] = [{} for _ in texts]
        calls = n
        if self.include_slots:
            slot_maps = self._extract_slots(problem, n)
            calls += n
        samples = tuple(
            StepSample(text=text, references=detect_references(text, outputs), slots=slots)
            for text, slots in zip(texts, slot_maps))
        return SampleBatch(samples=samples, sampler_calls=calls)

    def greedy_step(self, problem, step_index: int, outputs: Mapping[int, str],
                    refinement: RefinementNote | None = None) -> StepSample:
        prompt = self._solution_prompt(problem, refinement)
        text = self.chat.complete([{"role": "user", "content": prompt}],
                                  n=1, temperature=GREEDY_TEMPERATURE,
                                  max_tokens=self.max_tokens)[0]
        return StepSample(text=text, references=detect_references(text, outputs))

    def conservative_step(self, problem, step_index: int, outputs: Mapping[int, str],
                          revision: int = 0, ordinal: int = 0,
                          refinement: RefinementNote | None = None) -> StepSample:
        prompt = self._solution_prompt(problem, refinement)
        prompt += "\nRely only on the most literal reading of the task; make no assumptions."
        text = self.chat.complete([{"role": "user", "content": prompt}],
                                  n=1, temperature=GREEDY_TEMPERATURE,
                                  max_tokens=self.max_tokens)[0]
        return StepSample(text=text, references=detect_references(text, outputs))

    def embed_batch(self, problem, texts: Sequence[str], context_key: str) -> np.ndarray:
        return self.embedder.embed(texts)

    def consumed_embedding(self, problem, consumer_step: int, producer_step: int,
                           produced_vec: Sequence[float]) -> np.ndarray:
        produced = np.asarray(produced_vec, dtype=float)
        return produced / np.linalg.norm(produced)

    def verify(self, problem, step_index: int, text: str) -> bool:
        kind = getattr(problem.task_kind, "value", str(problem.task_kind))
        template = _load_prompt(_VERIFY_PROMPTS.get(kind, "verify_qa.txt"))
        prompt = (template
                  .replace("{problem_text}", problem.statement)
                  .replace("{answer}", text)
                  .replace("{answer_form}", problem.metadata.get("answer_form", "text"))
                  .replace("{context}", problem.metadata.get("context", ""))
                  .replace("{question}", problem.statement))
        reply = self.chat.complete([{"role": "user", "content": prompt}],
                                   n=1, temperature=GREEDY_TEMPERATURE,
                                   max_tokens=self.max_tokens)[0]
        try:
            data = json.loads(reply)
            verdict = str(data.get("verdict", "")).upper()
        except ValueError:
            return False  # unparseable verdict counts as a failure
        return verdict == "PASS"
