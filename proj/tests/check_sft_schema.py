"""Validates every line of an SFT JSONL export against the example schema."""
import json
import sys

import jsonschema

schema_path, data_path = sys.argv[1], sys.argv[2]
with open(schema_path) as f:
    validator = jsonschema.Draft202012Validator(json.load(f))
count = 0
with open(data_path) as f:
    for n, line in enumerate(f, 1):
        ex = json.loads(line)
        errors = list(validator.iter_errors(ex))
        if errors:
            sys.exit(f"line {n}: {errors[0].message}")
        if ex["mask_from"] > len(ex["target"]):
            sys.exit(f"line {n}: mask_from beyond target")
        count += 1
if count == 0:
    sys.exit("no examples")
print(f"{count} examples valid")
