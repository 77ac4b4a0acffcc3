from cli.commands import (
    bench_command,
    color_command,
    eval_command,
    flow_command,
    plan_command,
    rate_command,
)

COMMANDS = [eval_command, plan_command, rate_command, flow_command, color_command, bench_command]
