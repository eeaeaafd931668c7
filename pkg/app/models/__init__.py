# Domain objects: the APANet model, adaptation experiments and their run archives.
