"""Prompt templates for the policy, the baselines and the judge."""

import hashlib

AGENT_SYSTEM_PROMPT = (
    "Answer the given question. You must conduct reasoning inside <think> and </think> first every time "
    "you get new information. After reasoning, if you find you lack some knowledge, you can call a search "
    "engine by <search> query </search> and user will return the searched results. Every time you retrieve "
    "an image, you have the option to crop it to obtain a clearer view, the format for coordinates is "
    "<bbox>[x1, y1, x2, y2]</bbox>. You can search as many times as your want. If you find no further "
    "external knowledge needed, you can directly provide the answer inside <answer> and </answer>, without "
    "detailed illustrations. For example, <answer> Beijing </answer>."
)

SEARCH_ONLY_SYSTEM_PROMPT = (
    "Answer the given question. You must conduct reasoning inside <think> and </think> first every time "
    "you get new information. After reasoning, if you find you lack some knowledge, you can call a search "
    "engine by <search> query </search> and user will return the searched results. You can search as many "
    "times as your want. If you find no further external knowledge needed, you can directly provide the "
    "answer inside <answer> and </answer>, without detailed illustrations. For example, <answer> Beijing "
    "</answer>."
)

DIRECT_SYSTEM_PROMPT = (
    "Answer the given question. You must conduct reasoning inside <think> and </think> first every time "
    "you get new information. After reasoning, you should directly provide the answer inside <answer> and "
    "</answer>, without detailed illustrations. For example, <answer> Beijing </answer>."
)

USER_PROMPT = "Query: {query}"
DIRECT_USER_PROMPT = "Query: {query}\nReference: {reference}"

JUDGE_SYSTEM_PROMPT = """Character Introduction
You are an expert evaluation system for a question answering chatbot.
You are given the following information:
- the query
- a generated answer
- a reference answer
Your task is to evaluate the correctness of the generated answer.

Response Format
Your response should be formatted as following:
<judge>True or False</judge>

If the generated answer is correct, please set "judge" to True. Otherwise, please set "judge" to False.

Please note that the generated answer may contain additional information beyond the reference answer."""

JUDGE_USER_PROMPT = "Query: {query}\nReference Answer: {reference}\nGenerated Answer: {generated}"

GROUNDING_PROMPT = (
    "Locate the region of the image described by the reasoning below. Reply with the box in the image's "
    "pixel coordinates as <bbox>[x1, y1, x2, y2]</bbox>.\nReasoning: {thought}"
)

INVALID_ACTION_TEXT = (
    "Invalid action ({reason}). Reason inside <think> </think>, then emit exactly one of "
    "<search> query </search>, <bbox>[x1, y1, x2, y2]</bbox> or <answer> answer </answer>."
)

ENV_ERROR_TEXT = "Environment error ({reason}); the search service did not respond. You may try again."

PROMPTS = {
    "agent": AGENT_SYSTEM_PROMPT,
    "search-only": SEARCH_ONLY_SYSTEM_PROMPT,
    "direct": DIRECT_SYSTEM_PROMPT,
}


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def judge_messages(query: str, reference: str, generated: str) -> list[dict]:
    return [
        {"role": "system", "text": JUDGE_SYSTEM_PROMPT},
        {"role": "user", "text": JUDGE_USER_PROMPT.format(query=query, reference=reference, generated=generated)},
    ]
