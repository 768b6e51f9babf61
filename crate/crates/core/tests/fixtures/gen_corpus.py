#!/usr/bin/env python3
"""Regenerates corpus.jsonl: tagged prompts used by the round-trip and
profiler integration tests. Output is deterministic."""

import json
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent

APIGEN = """<instruction:guideline:role>You are an expert in composing functions.
</instruction:guideline:role>

<instruction:guideline>
You are given a question and a set of possible functions.
Based on the question, you will need to make one or more function/tool calls to achieve the
purpose. If none of the functions can be used, point it out and refuse to answer.
If the given question lacks the parameters required by the function, also point it out.
</instruction:guideline>

<tools:tool_description>You have access to the following tools:</tools:tool_description>
<tools>[{"type":"function","function":{"name":"similarity_score","description":
"Calculates the similarity score between two lists of integers.",
"parameters":{"type":"object",
"properties":{"list1":{"type":"array","items":{"type":"integer"},
"description":"The first list of integers."},
"list2":{"type":"array","items":{"type":"integer"},
"description":"The second list of integers."}},
"required":["list1","list2"]}}}]</tools>

<output_const:format>The output MUST strictly adhere to the following format, and NO other text
MUST be included.
The example format is as follows. Please make sure the parameter type is correct.
If no function call is needed, please make the tool calls an empty list '[]'.
<tool_call>[
{"name": "func_name1", "arguments": {"argument1": "value1", "argument2": "value2"}},
... (more tool calls as required)
]</tool_call></output_const:format>

<request_query>
Calculate the similarity score between the lists
[1, 2, 3, 4, 5] and [3, 4, 5, 6, 7].
</request_query>"""

TAGS = [
    "instruction", "instruction:task", "instruction:guideline", "instruction:guideline:role",
    "instruction:guideline:scenario", "instruction:guideline:behavioral", "instruction:guideline:emotion",
    "instruction:guideline:cot", "instruction:guideline:safety", "contextual_ref", "contextual_ref:fewshot",
    "contextual_ref:knowledge_base", "contextual_ref:context_for_task", "request_query", "output_const",
    "output_const:label", "output_const:wordlimit", "output_const:format", "output_const:style_tone",
    "other", "other:adversarial", "tools", "tools:tool_name", "tools:tool_description", "tools:parameters",
]

CONTENTS = [
    "Classify the review as positive or negative.",
    "# Task\nSummarize the passage below.",
    "Let's think step by step.",
    "Example 1: input -> output",
    "1. First item\n2. Second item",
    "- bullet one\n- bullet two",
    "What is the capital of France?",
    "Respond in 50 words or less.",
    "Format the answer as JSON: {\"answer\": ...}",
    "See [the docs](https://example.com) for details.",
    "Use <b>bold</b> where needed.",
    "**Important**: avoid harmful content.",
    "Question:",
    "Café, naïve, 日本語 and emoji 🎉 survive.",
    "&&&!!!!!!",
    "Use `code` spans and ```fenced``` blocks.",
    "Answer with one of ['yes', 'no'].",
    "You are a senior data scientist.",
    "Keep a friendly tone!",
    "",
]

DELIMS = ["\n\n", "\n", " ", "\t", "\n#####\n", "", "   ", " | ", "\n\n\n", "---"]


def tagged(rng, n):
    parts = []
    for i in range(n):
        tag = rng.choice(TAGS)
        parts.append(f"<{tag}>{rng.choice(CONTENTS)}</{tag}>")
        if i + 1 < n:
            parts.append(rng.choice(DELIMS))
    lead = rng.choice(["", "", "Preamble text. ", "<unknown_tag>x</unknown_tag> "])
    trail = rng.choice(["", "", " trailing", "\n"])
    return lead + "".join(parts) + trail


def main():
    rng = random.Random(20240601)
    records = [
        {"id": "apigen-example", "messages": [{"role": "user", "content": APIGEN}]},
        {
            "id": "apigen-split",
            "messages": [
                {"role": "system", "content": APIGEN.split("\n\n<request_query>")[0]},
                {"role": "user", "content": APIGEN[APIGEN.index("<request_query>"):]},
            ],
        },
        {"id": "plain", "messages": [{"role": "user", "content": "No tags at all here."}]},
        {"id": "empty", "messages": [{"role": "user", "content": ""}]},
        {"id": "uppercase-inert", "messages": [{"role": "user", "content": "<INSTRUCTION>kept</INSTRUCTION> <instruction>real</instruction>"}]},
        {"id": "attr-inert", "messages": [{"role": "user", "content": "<span class=\"n\">x</span> <instruction>y</instruction>"}]},
    ]
    i = 0
    while len(records) < 60:
        i += 1
        kind = rng.random()
        if kind < 0.6:
            msgs = [{"role": "user", "content": tagged(rng, rng.randint(1, 6))}]
        elif kind < 0.8:
            msgs = [
                {"role": "system", "content": tagged(rng, rng.randint(1, 3))},
                {"role": "user", "content": tagged(rng, rng.randint(1, 4))},
            ]
        else:
            msgs = []
            for _ in range(rng.randint(2, 3)):
                msgs.append({"role": "user", "content": tagged(rng, rng.randint(1, 3))})
                msgs.append({"role": "assistant", "content": rng.choice(CONTENTS)})
            msgs.append({"role": "user", "content": tagged(rng, rng.randint(1, 4))})
        records.append({"id": f"gen-{i:03d}", "messages": msgs})
    with open(HERE / "corpus.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
