import os

import httpx

base = os.environ["AAS_API_BASE"]
headers = {"X-AAS-Instance": os.environ.get("AAS_INSTANCE_ID", "")}
src = os.environ["AAS_INPUT_POSITION"]
dst = os.environ["AAS_OUTPUT_COMPENSATED_POSITION"]
delta = [float(os.environ.get(f"DELTA_{a}", "0")) for a in "XYZ"]
with httpx.Client(base_url=base, headers=headers) as client:
    for axis, d in zip("XYZ", delta):
        value = client.get(f"/{src}.{axis}/$value").json()["value"]
        client.patch(f"/{dst}.{axis}", json={"value": value + d}).raise_for_status()
