//! Cycle-consistent translation between the two label domains.

mod losses;
mod networks;
mod train;

pub use losses::{adversarial_loss, cycle_loss, l1_with_grad, lsgan_losses, lsgan_with_grad, Translator};
pub use networks::{
    Discriminator, DiscriminatorCache, DiscriminatorConfig, Generator, GeneratorCache, GeneratorConfig,
};
pub use train::{
    load_gan_checkpoint, save_gan_checkpoint, train_gan, write_loss_csv, EpochRecord, GanConfig, GanTrainState,
    GeneratorPair, LossRecord, ReplayBuffer,
};
