"""Answer generation from a retrieval bundle: text answer, per-image answers, merge, integrate."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import GatewayError, InputError
from .gateway import Gateway
from .retrieval import ContextBundle


@dataclass
class GenerationTrace:
    query: str
    llm_response: str = ""
    mllm_responses: list[tuple[str, str]] = field(default_factory=list)
    merged_mllm: str = ""
    final: str = ""
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "llm_response": self.llm_response,
            "mllm_responses": [{"image": img, "response": text} for img, text in self.mllm_responses],
            "merged_mllm": self.merged_mllm,
            "final": self.final,
            "errors": list(self.errors),
        }


def format_responses(responses: list[str]) -> str:
    return "\n\n".join(f"Response {i}:\n{text}" for i, text in enumerate(responses, start=1))


def answer(
    query: str,
    bundle: ContextBundle,
    gateway: Gateway,
    *,
    samples_per_image: int = 1,
    base_dir: str | Path | None = None,
) -> GenerationTrace:
    trace = GenerationTrace(query)
    context = bundle.to_text()
    try:
        trace.llm_response = gateway.chat("text_answer", {"query": query, "context": context})
    except GatewayError as exc:
        trace.errors.append(f"text answer: {exc}")

    if not bundle.images:
        trace.final = trace.llm_response
        return trace

    for image in bundle.images:
        path = Path(image)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        for _ in range(samples_per_image):
            try:
                reply = gateway.vision_chat("multimodal_answer", {"query": query, "context": context}, [path])
            except (GatewayError, InputError) as exc:
                trace.errors.append(f"image answer for {image}: {exc}")
                continue
            trace.mllm_responses.append((image, reply))

    replies = [text for _, text in trace.mllm_responses]
    if len(replies) == 1:
        trace.merged_mllm = replies[0]
    elif len(replies) > 1:
        try:
            trace.merged_mllm = gateway.chat("merge_mllm_responses", {"query": query, "responses": format_responses(replies)})
        except GatewayError as exc:
            trace.errors.append(f"merge: {exc}")
            trace.merged_mllm = replies[0]

    if not trace.merged_mllm:
        trace.final = trace.llm_response
        return trace
    try:
        trace.final = gateway.chat(
            "final_integration",
            {"query": query, "llm_response": trace.llm_response, "mllm_response": trace.merged_mllm},
        )
    except GatewayError as exc:
        trace.errors.append(f"integration: {exc}")
        trace.final = trace.merged_mllm or trace.llm_response
    return trace
