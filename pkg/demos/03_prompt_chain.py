"""
From plan item to prompt
========================

A prompt is built in two steps: the scene template places class, weather and
time after the fine-tuned model's identifier phrase, then a describer adds
concrete weather and lighting detail. The describer is either a
chat-completion endpoint or the offline descriptor bank shipped with the
package.
"""
import os

from weathergen import (
    ChatCompletionBackend,
    DescriptorBank,
    PromptTemplate,
    SamplingTable,
    compose_scene,
    enrich,
    generate_prompt,
    make_plan,
    ConditionGrid,
)

# %%
# The template alone.
tmpl = PromptTemplate(identifier_token="V*")
print(compose_scene("motorcycle", "rainy", "daytime", tmpl).text)
print(compose_scene("motorcycle", "rainy", "daytime", PromptTemplate(include_identifier=False)).text)

# %%
# Offline enrichment: the fragment is picked by the item's seed, so the same
# item always produces the same prompt.
bank = DescriptorBank.default()
base = compose_scene("rider", "snowy", "nighttime", tmpl)
for seed in range(3):
    print(enrich(base, bank, budget=60, seed=seed).text)

# %%
# Prompts for the first few items of a plan.
table = SamplingTable((12, 17, 13), ("rider", "motorcycle", "car"), (2 / 3, 2 / 9, 1 / 9))
plan = make_plan(table, ConditionGrid(), 6, master_seed=1)
for item in plan.items:
    spec = generate_prompt(item, tmpl, bank)
    print(f"{spec.index}: [{spec.source}] {spec.enriched_text}")

# %%
# With a live endpoint (any OpenAI-compatible server, e.g. a local Llama) set
# DESCRIBER_URL and, if needed, WEATHERGEN_TEXT_TOKEN. Replies are cut to the
# word budget and the class name is put back if the model dropped it. An
# unreachable endpoint falls back to the bank.
url = os.environ.get("DESCRIBER_URL")
if url:
    backend = ChatCompletionBackend(url, model=os.environ.get("DESCRIBER_MODEL", "llama"))
    spec = generate_prompt(plan.items[0], tmpl, backend, 60, fallback=bank)
    print(f"[{spec.source}] {spec.enriched_text}")
