from deskedit.app.commands.data import gen_data, make_spec
from deskedit.app.commands.edit import edit_cmd, invert_cmd
from deskedit.app.commands.train import train_denoiser_cmd, train_prompt_cmd
from deskedit.app.commands.verify import stats_cmd, verify_cmd

# All subcommands, in help order
all_commands = [
    gen_data,
    make_spec,
    train_denoiser_cmd,
    train_prompt_cmd,
    invert_cmd,
    edit_cmd,
    verify_cmd,
    stats_cmd,
]
