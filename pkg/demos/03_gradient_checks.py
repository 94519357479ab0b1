"""
Checking the autograd engine
============================

Backprop against central differences, op by op and then through the
whole combined loss.
"""

from cfcrn.gradcheck import end_to_end_check, op_checks

for res in op_checks(seed=0):
    print(res.line())

# float64 run of the full network, a few coordinates per parameter group
for res in end_to_end_check(seed=0, per_group=4):
    print(res.line())
