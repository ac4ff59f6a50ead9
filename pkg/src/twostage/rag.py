"""Retrieval-augmented MCQ evaluation against a chat-completion endpoint.

The prompt template is fixed down to the byte: header token strings, line
wrapping, and trailing spaces are all load-bearing because evaluation
comparability depends on every model seeing identical instructions. Double
braces in the template are format escapes and render as single braces.

Responses are expected to be a single raw JSON object, but extraction is
deliberately lenient (models wrap JSON in fences or prose despite
instructions); every leniency or failure is recorded per item in the trace.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import requests

from .evaluation import AccuracyReport, accuracy_report
from .formats import McqItem
from .pipeline import ContextBundle, RetrievalPipeline, assemble_context
from .types import Document

__all__ = [
    "PROMPT_TEMPLATE",
    "GeneratorConfig",
    "GenerationResult",
    "GeneratorError",
    "GeneratorTimeoutError",
    "GeneratorHttpError",
    "GeneratorProtocolError",
    "RetryExhaustedError",
    "ParseError",
    "NoJsonError",
    "MissingFieldError",
    "BadChoiceError",
    "SystemicGeneratorError",
    "render_prompt",
    "generate",
    "parse_generation",
    "run_rag_eval",
]

TOKEN_ENV_VAR = "TWOSTAGE_GENERATOR_TOKEN"

_SYSTEM_OPEN = "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n"
_USER_OPEN = "<|eot_id|><|start_header_id|>user<|end_header_id|>\n"
_ASSISTANT_OPEN = "<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n"

# Several template lines end in a significant trailing space (the original
# wraps mid-sentence); they are written as \x20 so editors cannot strip them.
PROMPT_TEMPLATE = """<|begin_of_text|><|start_header_id|>system<|end_header_id|>
You are a meticulous and highly accurate medical AI assistant.
Your sole purpose is to analyze provided medical documents\x20
to answer a multiple-choice question.
You MUST strictly follow all instructions and provide your\x20
output ONLY in the specified JSON format.
<|eot_id|><|start_header_id|>user<|end_header_id|>
### TASK ###
Analyze the documents and answer the question according to\x20
the rules below.

### CONTEXT DOCUMENTS ###
{context_str}

### QUESTION AND OPTIONS ###
**Question:** {query}

**Options:**
{options}

### OUTPUT RULES ###
1.  **Reasoning:** First, think step-by-step to arrive at\x20
your conclusion. Your entire thought process must be captured\x20
in the `step_by_step_thinking` field.
2.  **Relevance Check:** Determine if the context documents\x20
were relevant and necessary to answer the question. Use "YES"\x20
or "NOT" for the `relevant_context` field.
3.  **Final Answer:** Choose one single, definitive letter\x20
corresponding to the correct option. This will be the value\x20
for the `answer_choice` field.
4.  **Strict JSON Format:** Your entire response MUST be a\x20
single, raw JSON object. Do not write any text, explanation,\x20
or markdown formatting (like ```json) before or after the\x20
JSON object.

Your response must conform to this exact JSON structure:
```json
{{
  "step_by_step_thinking": "Your detailed analysis and\x20
  reasoning to reach the answer.",
  "relevant_context": "YES",
  "answer_choice": "C"
}}
<|eot_id|><|start_header_id|>assistant<|end_header_id|>
"""


@dataclass(frozen=True)
class GeneratorConfig:
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0
    timeout: float = 30.0
    max_retries: int = 2
    backoff_base: float = 0.5
    passage_format: str = "[{doc_id}] {title} — {text}"
    passage_separator: str = "\n\n"
    literal_template: bool = False

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class GenerationResult:
    step_by_step_thinking: str
    relevant_context: str
    answer_choice: str
    raw_response: str

    def __post_init__(self):
        if self.relevant_context not in ("YES", "NOT"):
            raise ValueError(f"relevant_context must be YES or NOT, got {self.relevant_context!r}")
        if len(self.answer_choice) != 1 or not "A" <= self.answer_choice <= "Z":
            raise ValueError(f"answer_choice must be a single letter, got {self.answer_choice!r}")


class GeneratorError(Exception):
    """Base for failures talking to the generation endpoint."""


class GeneratorTimeoutError(GeneratorError):
    def __init__(self, attempts: int):
        super().__init__(f"generation timed out (attempt {attempts})")
        self.attempts = attempts


class GeneratorHttpError(GeneratorError):
    def __init__(self, status: int, attempts: int):
        super().__init__(f"generation endpoint returned HTTP {status} (attempt {attempts})")
        self.status = status
        self.attempts = attempts


class GeneratorProtocolError(GeneratorError):
    """Endpoint answered 2xx but the completion payload was malformed."""


class RetryExhaustedError(GeneratorError):
    def __init__(self, attempts: int, last: Exception):
        super().__init__(f"all {attempts} generation attempts failed: {last}")
        self.attempts = attempts
        self.last = last


class SystemicGeneratorError(GeneratorError):
    """Every item in an evaluation failed at the generator; nothing scored."""


class ParseError(Exception):
    """Base for malformed generation output."""


class NoJsonError(ParseError):
    pass


class MissingFieldError(ParseError):
    def __init__(self, fieldname: str):
        super().__init__(f"generation JSON lacks required field {fieldname!r}")
        self.field = fieldname


class BadChoiceError(ParseError):
    def __init__(self, fieldname: str, value):
        super().__init__(f"bad value for {fieldname}: {value!r}")
        self.field = fieldname
        self.value = value


# --------------------------------------------------------------------------
# prompt rendering
# --------------------------------------------------------------------------


def render_prompt(
    context: ContextBundle, item: McqItem, cfg: GeneratorConfig = GeneratorConfig()
) -> str:
    """Instantiate the fixed template; identical inputs give identical bytes."""
    context_str = cfg.passage_separator.join(
        cfg.passage_format.format(doc_id=doc_id, title=title, text=text)
        for doc_id, title, text in context.passages
    )
    options = "\n".join(f"{letter}. {text}" for letter, text in item.options)
    return PROMPT_TEMPLATE.format(
        context_str=context_str, query=item.question, options=options
    )


def split_prompt_roles(prompt: str) -> list[dict[str, str]]:
    """Map the template's header-token segments onto chat roles."""
    if not prompt.startswith(_SYSTEM_OPEN) or _USER_OPEN not in prompt:
        return [{"role": "user", "content": prompt}]
    rest = prompt[len(_SYSTEM_OPEN):]
    system_text, _, rest = rest.partition(_USER_OPEN)
    user_text = rest.partition(_ASSISTANT_OPEN)[0] if _ASSISTANT_OPEN in rest else rest
    return [
        {"role": "system", "content": system_text.strip("\n")},
        {"role": "user", "content": user_text.strip("\n")},
    ]


# --------------------------------------------------------------------------
# generation client
# --------------------------------------------------------------------------


def _completion_text(payload: dict) -> str:
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise GeneratorProtocolError(f"unexpected completion payload shape: {exc}") from exc


def generate(prompt: str, cfg: GeneratorConfig, sleep=time.sleep) -> str:
    """POST the prompt to a chat-completion endpoint and return the text.

    Transient failures (timeouts, connection errors, 5xx) are retried with
    exponential backoff up to max_retries; 4xx and malformed payloads fail
    immediately.
    """
    if cfg.literal_template:
        messages = [{"role": "user", "content": prompt}]
    else:
        messages = split_prompt_roles(prompt)
    body = {"model": cfg.model, "temperature": cfg.temperature, "messages": messages}
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(TOKEN_ENV_VAR)
    if token:
        headers["Authorization"] = f"Bearer {token}"

    attempts = cfg.max_retries + 1
    last: Exception | None = None
    for attempt in range(1, attempts + 1):
        try:
            response = requests.post(
                cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout
            )
        except requests.Timeout:
            last = GeneratorTimeoutError(attempt)
        except requests.RequestException as exc:
            last = GeneratorError(f"request failed (attempt {attempt}): {exc}")
        else:
            if response.status_code >= 500:
                last = GeneratorHttpError(response.status_code, attempt)
            elif response.status_code >= 300:
                raise GeneratorHttpError(response.status_code, attempt)
            else:
                try:
                    payload = response.json()
                except ValueError as exc:
                    raise GeneratorProtocolError(f"endpoint returned non-JSON body: {exc}") from exc
                return _completion_text(payload)
        if attempt < attempts:
            sleep(cfg.backoff_base * (2 ** (attempt - 1)))
    raise RetryExhaustedError(attempts, last)


# --------------------------------------------------------------------------
# response parsing
# --------------------------------------------------------------------------


def _balanced_objects(raw: str):
    """Yield every top-level {...} substring, string-literal aware."""
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(raw):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            if depth > 0:
                in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                yield raw[start : i + 1]


def parse_generation(raw: str) -> GenerationResult:
    """Extract and validate the first parseable JSON object in the output."""
    obj = None
    for candidate in _balanced_objects(raw):
        try:
            parsed = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, dict):
            obj = parsed
            break
    if obj is None:
        raise NoJsonError("no balanced JSON object found in generation output")

    for fieldname in ("step_by_step_thinking", "relevant_context", "answer_choice"):
        if fieldname not in obj:
            raise MissingFieldError(fieldname)

    relevant = str(obj["relevant_context"]).strip().upper()
    if relevant not in ("YES", "NOT"):
        raise BadChoiceError("relevant_context", obj["relevant_context"])
    choice = str(obj["answer_choice"]).strip().upper()
    if len(choice) != 1 or not "A" <= choice <= "Z":
        raise BadChoiceError("answer_choice", obj["answer_choice"])
    return GenerationResult(
        step_by_step_thinking=str(obj["step_by_step_thinking"]),
        relevant_context=relevant,
        answer_choice=choice,
        raw_response=raw,
    )


# --------------------------------------------------------------------------
# end-to-end evaluation loop
# --------------------------------------------------------------------------


def _evaluate_item(
    item: McqItem,
    pipeline: RetrievalPipeline,
    corpus: dict[str, Document],
    query_inputs: dict,
    cfg: GeneratorConfig,
    generate_fn,
) -> dict:
    dense, tokens = query_inputs[item.id]
    run = pipeline.search(dense, tokens, query_id=item.id)
    bundle = assemble_context(run, corpus, item.question)
    prompt = render_prompt(bundle, item, cfg)
    trace = {
        "item_id": item.id,
        "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
        "doc_ids": list(run.doc_ids()),
        "raw_response": None,
        "answer": None,
        "relevant_context": None,
        "error": None,
        "generator_failed": False,
    }
    try:
        raw = generate_fn(prompt) if generate_fn is not None else generate(prompt, cfg)
    except GeneratorError as exc:
        trace["error"] = f"{type(exc).__name__}: {exc}"
        trace["generator_failed"] = True
        return trace
    trace["raw_response"] = raw
    try:
        result = parse_generation(raw)
    except ParseError as exc:
        trace["error"] = f"{type(exc).__name__}: {exc}"
        return trace
    trace["answer"] = result.answer_choice
    trace["relevant_context"] = result.relevant_context
    return trace


def run_rag_eval(
    items: list[McqItem],
    pipeline: RetrievalPipeline,
    corpus: dict[str, Document],
    query_inputs: dict[str, tuple],
    cfg: GeneratorConfig,
    concurrency: int = 4,
    trace_path=None,
    generate_fn=None,
    config_label: str = "rag",
) -> tuple[AccuracyReport, list[dict]]:
    """Retrieve, prompt, generate, and score every item.

    ``query_inputs`` maps item id to (dense vector, TokenMatrix or None).
    ``generate_fn`` replaces the HTTP client when supplied (stub generators
    in tests, cached transcripts in reruns). Unparseable or failed items
    count as wrong; only a failure of every single item aborts.
    """
    if not items:
        raise ValueError("no items to evaluate")
    missing = [item.id for item in items if item.id not in query_inputs]
    if missing:
        raise KeyError(f"missing query embeddings for items: {missing[:5]}")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")

    def work(item: McqItem) -> dict:
        return _evaluate_item(item, pipeline, corpus, query_inputs, cfg, generate_fn)

    if concurrency == 1:
        traces = [work(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            traces = list(pool.map(work, items))

    if all(trace["generator_failed"] for trace in traces):
        raise SystemicGeneratorError(
            f"generator failed for all {len(items)} items; "
            f"first error: {traces[0]['error']}"
        )

    predictions = {
        trace["item_id"]: trace["answer"] for trace in traces if trace["answer"] is not None
    }
    report = accuracy_report(config_label, predictions, items)
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for trace in traces:
                fh.write(json.dumps(trace, ensure_ascii=False) + "\n")
    return report, traces
